#include <math.h>
#include <stdio.h>
#include <string.h>

#include "acts.h"

#define CHECK(call)                                                        \
    do {                                                                   \
        ActsStatus s_ = (call);                                            \
        if (s_ != ACTS_STATUS_OK) {                                        \
            fprintf(stderr, "%s failed: %d %s\n", #call, (int)s_,          \
                    acts_last_error() ? acts_last_error() : "");           \
            return 1;                                                      \
        }                                                                  \
    } while (0)

int main(void) {
    enum { N = 3, L = 60 };
    const char *names[N] = {"a", "b", "c"};
    double values[N * L];
    for (int i = 0; i < N; i++)
        for (int t = 0; t < L; t++)
            values[i * L + t] = 10.0 * (i + 1) + 5.0 * sin(0.3 * t + i) + 0.1 * t;

    ActsDataset *ds = NULL;
    CHECK(acts_dataset_from_values("hosp", "2020-03-01", names, N, values, L, &ds));
    size_t n = 0, len = 0;
    CHECK(acts_dataset_shape(ds, &n, &len));
    if (n != N || len != L) return 1;

    ActsModel *model = NULL;
    CHECK(acts_train(ds, "iters = 20\nbatch = 8\n", 1, &model));
    double out[7];
    size_t written = 0;
    CHECK(acts_forecast(model, ds, 0, 1, out, 7, &written));
    if (written != 7) return 1;
    for (size_t j = 0; j < written; j++)
        if (!(out[j] >= 0.0) || !isfinite(out[j])) return 1;

    if (acts_forecast(model, ds, 0, 1, out, 3, &written) != ACTS_STATUS_BUFFER_TOO_SMALL) return 1;
    if (acts_forecast(model, ds, 0, 2, out, 7, &written) != ACTS_STATUS_USAGE) return 1;
    if (acts_last_error() == NULL) return 1;

    ActsDataset *missing = NULL;
    if (acts_dataset_load("/nonexistent.csv", "hosp", &missing) != ACTS_STATUS_IO) return 1;
    if (strstr(acts_last_error(), "/nonexistent.csv") == NULL) return 1;

    double w = -1.0;
    double f[2] = {2.0, 4.0}, x[2] = {1.0, 5.0};
    CHECK(acts_wape(f, x, 2, &w));
    if (fabs(w - 2.0 / 6.0) > 1e-15) return 1;

    acts_model_free(model);
    acts_dataset_free(ds);
    printf("ok %s\n", acts_version());
    return 0;
}

/* Runs a trained detector on a synthetic single-channel signal.
 *
 *   cc detect.c -I../include -L../../../target/release -larousal_ffi -lm -o detect
 *   ./detect runs/se
 */
#include <math.h>
#include <stdio.h>
#include <stdlib.h>

#include "arousal.h"

int main(int argc, char **argv) {
    if (argc != 2) {
        fprintf(stderr, "usage: %s RUN_DIR\n", argv[0]);
        return 2;
    }
    ArousalModel *model = NULL;
    if (arousal_model_load(argv[1], &model) != AROUSAL_STATUS_OK) {
        fprintf(stderr, "load failed: %s\n", arousal_last_error());
        return 1;
    }
    size_t channels = arousal_model_channels(model);
    printf("%s, %zu channel(s), threshold %.2f\n", arousal_version(), channels,
           arousal_model_threshold(model));

    const double fs = 256.0;
    const size_t n = (size_t)(300.0 * fs);
    double *x = malloc(channels * n * sizeof(double));
    unsigned state = 1;
    for (size_t i = 0; i < channels * n; i++) {
        state = state * 1103515245u + 12345u;
        double t = (double)(i % n) / fs;
        double burst = (t > 100.0 && t < 108.0) ? 3.0 * sin(2.0 * M_PI * 10.0 * t) : 0.0;
        x[i] = (double)(state >> 16) / 32768.0 - 1.0 + burst;
    }

    ArousalEvents *events = NULL;
    ArousalStatus st = arousal_detect(model, x, channels, n, fs, -1.0, &events);
    free(x);
    if (st != AROUSAL_STATUS_OK) {
        fprintf(stderr, "detect failed: %s\n", arousal_last_error());
        arousal_model_free(model);
        return 1;
    }
    for (size_t i = 0; i < arousal_events_len(events); i++) {
        ArousalEvent e;
        arousal_events_get(events, i, &e);
        printf("%8.2f s  %5.2f s  p=%.3f\n", e.start_s, e.duration_s, e.probability);
    }
    arousal_events_free(events);
    arousal_model_free(model);
    return 0;
}

/* Tunable-scalability workload for the auto-tuner tests.
 *
 * A queue of identical spin units is drained by one worker thread per
 * visible CPU.  When --knee K is positive, at most K workers make
 * progress at a time (the rest wait on a semaphore), so throughput
 * saturates at K threads; --knee 0 scales linearly with the visible
 * core count.
 */
#define _GNU_SOURCE
#include <pthread.h>
#include <sched.h>
#include <semaphore.h>
#include <stdatomic.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <sys/syscall.h>
#include <time.h>
#include <unistd.h>

static long unit_iters = 40000000L;
static atomic_long next_unit;
static long total_units = 32;
static int knee = 0;
static sem_t gate;

static void burn(void) {
    volatile unsigned long sink = 0;
    for (long i = 0; i < unit_iters; i++)
        sink += (unsigned long)i;
}

static void *worker(void *arg) {
    (void)arg;
    for (;;) {
        long unit = atomic_fetch_add(&next_unit, 1);
        if (unit >= total_units)
            return NULL;
        if (knee > 0) sem_wait(&gate);
        burn();
        if (knee > 0) sem_post(&gate);
    }
}

int main(int argc, char **argv) {
    int threads_opt = 0;
    for (int i = 1; i + 1 < argc; i += 2) {
        if (strcmp(argv[i], "--units") == 0) total_units = atol(argv[i + 1]);
        else if (strcmp(argv[i], "--knee") == 0) knee = atoi(argv[i + 1]);
        else if (strcmp(argv[i], "--unit-iters") == 0) unit_iters = atol(argv[i + 1]);
        else if (strcmp(argv[i], "--threads") == 0) threads_opt = atoi(argv[i + 1]);
        else { fprintf(stderr, "unknown option %s\n", argv[i]); return 2; }
    }
    int visible = threads_opt;
    if (visible <= 0) {
        unsigned char mask[128];
        memset(mask, 0, sizeof mask);
        long ret = syscall(SYS_sched_getaffinity, 0, sizeof mask, mask);
        visible = 0;
        if (ret > 0)
            for (long i = 0; i < ret; i++)
                visible += __builtin_popcount(mask[i]);
    }
    if (visible < 1) visible = 1;
    if (visible > 256) visible = 256;
    if (knee > 0) sem_init(&gate, 0, (unsigned)knee);

    struct timespec start, end;
    clock_gettime(CLOCK_MONOTONIC, &start);
    pthread_t *workers = calloc((size_t)visible, sizeof *workers);
    for (int i = 0; i < visible; i++)
        pthread_create(&workers[i], NULL, worker, NULL);
    for (int i = 0; i < visible; i++)
        pthread_join(workers[i], NULL);
    clock_gettime(CLOCK_MONOTONIC, &end);
    long long ns = (end.tv_sec - start.tv_sec) * 1000000000LL
                 + (end.tv_nsec - start.tv_nsec);
    printf("threads=%d units=%ld knee=%d elapsed_ns=%lld\n",
           visible, total_units, knee, ns);
    free(workers);
    return 0;
}

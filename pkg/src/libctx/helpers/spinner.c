/* Oversubscribing workload: spawns one spinner thread per visible CPU,
 * each burning a fixed amount of work.  Libraries that size their pools
 * from the perceived core count behave exactly like this, which is what
 * makes disjoint partitions pay off.
 */
#define _GNU_SOURCE
#include <pthread.h>
#include <sched.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <sys/syscall.h>
#include <unistd.h>

static long spin_iters = 200000000L;

static void *spin(void *arg) {
    (void)arg;
    volatile unsigned long sink = 0;
    for (long i = 0; i < spin_iters; i++)
        sink += (unsigned long)i;
    return NULL;
}

int main(int argc, char **argv) {
    if (argc > 1) spin_iters = atol(argv[1]);
    unsigned char mask[128];
    memset(mask, 0, sizeof mask);
    long ret = syscall(SYS_sched_getaffinity, 0, sizeof mask, mask);
    int visible = 0;
    if (ret > 0)
        for (long i = 0; i < ret; i++)
            visible += __builtin_popcount(mask[i]);
    if (visible < 1) visible = 1;
    if (visible > 256) visible = 256;
    pthread_t *threads = calloc((size_t)visible, sizeof *threads);
    for (int i = 0; i < visible; i++)
        pthread_create(&threads[i], NULL, spin, NULL);
    for (int i = 0; i < visible; i++)
        pthread_join(threads[i], NULL);
    printf("threads=%d iters=%ld\n", visible, spin_iters);
    free(threads);
    return 0;
}

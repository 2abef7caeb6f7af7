/* Syscall latency rows for the overhead benchmark.  Runs one row per
 * invocation and prints "row,samples,mean_ns" so the harness can run the
 * same binary traced and untraced.
 */
#define _GNU_SOURCE
#include <fcntl.h>
#include <sched.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <sys/mman.h>
#include <sys/syscall.h>
#include <time.h>
#include <unistd.h>

static long long now_ns(void) {
    struct timespec ts;
    clock_gettime(CLOCK_MONOTONIC, &ts);
    return ts.tv_sec * 1000000000LL + ts.tv_nsec;
}

int main(int argc, char **argv) {
    if (argc < 3) {
        fprintf(stderr, "usage: bench {getaffinity|open|mmap|getpid} SAMPLES\n");
        return 2;
    }
    const char *row = argv[1];
    long samples = atol(argv[2]);
    if (samples < 1) return 2;

    long long start, elapsed;
    if (strcmp(row, "getaffinity") == 0) {
        unsigned char mask[128];
        start = now_ns();
        for (long i = 0; i < samples; i++)
            syscall(SYS_sched_getaffinity, 0, sizeof mask, mask);
        elapsed = now_ns() - start;
    } else if (strcmp(row, "open") == 0) {
        start = now_ns();
        for (long i = 0; i < samples; i++) {
            int fd = syscall(SYS_openat, AT_FDCWD, "/proc/cpuinfo", O_RDONLY);
            if (fd >= 0) close(fd);
        }
        elapsed = now_ns() - start;
    } else if (strcmp(row, "mmap") == 0) {
        start = now_ns();
        for (long i = 0; i < samples; i++) {
            void *p = mmap(NULL, 4096, PROT_READ | PROT_WRITE,
                           MAP_PRIVATE | MAP_ANONYMOUS, -1, 0);
            if (p != MAP_FAILED) munmap(p, 4096);
        }
        elapsed = now_ns() - start;
    } else if (strcmp(row, "getpid") == 0) {
        start = now_ns();
        for (long i = 0; i < samples; i++)
            syscall(SYS_getpid);
        elapsed = now_ns() - start;
    } else {
        fprintf(stderr, "unknown row %s\n", row);
        return 2;
    }
    printf("%s,%ld,%.1f\n", row, samples, (double)elapsed / (double)samples);
    return 0;
}

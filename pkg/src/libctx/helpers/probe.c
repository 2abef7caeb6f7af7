/* Resource-introspection probe used by the supervised-tracing tests.
 *
 * Every query goes through raw syscalls so the output reflects exactly
 * what the kernel (or the interposition layer) answered.  Output is
 * deterministic: no pids, no timestamps.
 */
#define _GNU_SOURCE
#include <errno.h>
#include <fcntl.h>
#include <pthread.h>
#include <sched.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <sys/syscall.h>
#include <time.h>
#include <unistd.h>

#define MASK_BYTES 128

static long raw_getaffinity(unsigned char *mask, size_t len) {
    memset(mask, 0, len);
    return syscall(SYS_sched_getaffinity, 0, len, mask);
}

static int mask_count(const unsigned char *mask, size_t len) {
    int count = 0;
    for (size_t i = 0; i < len; i++)
        count += __builtin_popcount(mask[i]);
    return count;
}

static void print_mask_list(const unsigned char *mask, size_t len) {
    int first = 1;
    int start = -1, prev = -2;
    for (int cpu = 0; cpu <= (int)(len * 8); cpu++) {
        int set = cpu < (int)(len * 8) && (mask[cpu / 8] >> (cpu % 8) & 1);
        if (set && start < 0) {
            start = prev = cpu;
        } else if (set && cpu == prev + 1) {
            prev = cpu;
        } else if (!set && start >= 0) {
            if (!first) putchar(',');
            if (prev > start) printf("%d-%d", start, prev);
            else printf("%d", start);
            first = 0;
            start = -1;
        }
    }
}

static int cmd_mask(void) {
    unsigned char mask[MASK_BYTES];
    long ret = raw_getaffinity(mask, sizeof mask);
    if (ret < 0) { printf("error=%d\n", errno); return 1; }
    printf("mask=");
    print_mask_list(mask, (size_t)ret);
    printf("\ncount=%d\n", mask_count(mask, (size_t)ret));
    return 0;
}

static int cmd_cpuinfo(void) {
    int fd = syscall(SYS_openat, AT_FDCWD, "/proc/cpuinfo", O_RDONLY);
    if (fd < 0) { printf("error=%d\n", errno); return 1; }
    static char buf[1 << 20];
    ssize_t total = 0, n;
    while ((n = read(fd, buf + total, sizeof buf - 1 - total)) > 0)
        total += n;
    close(fd);
    buf[total] = 0;
    int stanzas = 0;
    for (char *p = buf; (p = strstr(p, "processor")); p++)
        if (p == buf || p[-1] == '\n') stanzas++;
    printf("stanzas=%d\n", stanzas);
    return 0;
}

static int cmd_online(void) {
    int fd = syscall(SYS_openat, AT_FDCWD, "/sys/devices/system/cpu/online", O_RDONLY);
    if (fd < 0) { printf("error=%d\n", errno); return 1; }
    char buf[4096];
    ssize_t n = read(fd, buf, sizeof buf - 1);
    close(fd);
    if (n < 0) n = 0;
    buf[n] = 0;
    printf("online=%s", buf);
    if (n == 0 || buf[n - 1] != '\n') putchar('\n');
    return 0;
}

static int cmd_env(const char *name) {
    const char *value = getenv(name);
    if (value) printf("env=%s\n", value);
    else printf("env=<unset>\n");
    return 0;
}

static int parse_list(const char *text, unsigned char *mask, size_t len) {
    memset(mask, 0, len);
    const char *p = text;
    while (*p) {
        char *end;
        long a = strtol(p, &end, 10);
        long b = a;
        if (end == p) return -1;
        p = end;
        if (*p == '-') {
            b = strtol(p + 1, &end, 10);
            if (end == p + 1) return -1;
            p = end;
        }
        for (long c = a; c <= b; c++) {
            if (c < 0 || c >= (long)(len * 8)) return -1;
            mask[c / 8] |= (unsigned char)(1 << (c % 8));
        }
        if (*p == ',') p++;
        else if (*p) return -1;
    }
    return 0;
}

/* Attempt one affinity change; report the result, the buffer contents
 * afterwards (restoration check), and the mask a fresh query returns. */
static int cmd_setaffinity(const char *list) {
    unsigned char req[8];
    if (parse_list(list, req, sizeof req) != 0) { printf("error=parse\n"); return 1; }
    unsigned char before[8];
    memcpy(before, req, sizeof req);
    long ret = syscall(SYS_sched_setaffinity, 0, sizeof req, req);
    int err = ret < 0 ? errno : 0;
    printf("ret=%ld errno=%d\n", ret, err);
    printf("bufok=%d\n", memcmp(before, req, sizeof req) == 0);
    unsigned char now[MASK_BYTES];
    long qret = raw_getaffinity(now, sizeof now);
    printf("query=");
    if (qret > 0) print_mask_list(now, (size_t)qret);
    printf("\n");
    return 0;
}

/* Drive all non-empty request masks over the first N cpus, one
 * setaffinity per mask; the monitor-side observer records ground truth. */
static int cmd_clamp_drive(int ncpus) {
    if (ncpus < 1 || ncpus > 16) { printf("error=range\n"); return 1; }
    for (long m = 1; m < (1L << ncpus); m++) {
        unsigned char req[8] = {0};
        req[0] = (unsigned char)(m & 0xff);
        req[1] = (unsigned char)((m >> 8) & 0xff);
        long ret = syscall(SYS_sched_setaffinity, 0, sizeof req, req);
        printf("m=%ld ret=%ld errno=%d\n", m, ret, ret < 0 ? errno : 0);
    }
    return 0;
}

struct thread_report { long ret; int count; };

static void *thread_probe(void *arg) {
    struct thread_report *report = arg;
    unsigned char mask[MASK_BYTES];
    report->ret = raw_getaffinity(mask, sizeof mask);
    report->count = report->ret > 0 ? mask_count(mask, (size_t)report->ret) : -1;
    return NULL;
}

static int cmd_threads(int nthreads) {
    pthread_t threads[64];
    struct thread_report reports[64];
    if (nthreads < 1 || nthreads > 64) { printf("error=range\n"); return 1; }
    for (int i = 0; i < nthreads; i++)
        pthread_create(&threads[i], NULL, thread_probe, &reports[i]);
    for (int i = 0; i < nthreads; i++)
        pthread_join(threads[i], NULL);
    for (int i = 0; i < nthreads; i++)
        printf("thread=%d count=%d\n", i, reports[i].count);
    return 0;
}

static int cmd_getcpu(int samples) {
    unsigned cpu_seen[1024 / 8] = {0};
    for (int i = 0; i < samples; i++) {
        int cpu = sched_getcpu();
        if (cpu >= 0 && cpu < 1024)
            cpu_seen[cpu / 8] |= 1u << (cpu % 8);
    }
    printf("cpus=");
    print_mask_list((unsigned char *)cpu_seen, sizeof cpu_seen);
    printf("\n");
    return 0;
}

static int cmd_spin(long ms) {
    struct timespec start, now;
    clock_gettime(CLOCK_MONOTONIC, &start);
    volatile unsigned long sink = 0;
    for (;;) {
        for (int i = 0; i < 50000; i++) sink += (unsigned long)i;
        clock_gettime(CLOCK_MONOTONIC, &now);
        long elapsed = (now.tv_sec - start.tv_sec) * 1000L
                     + (now.tv_nsec - start.tv_nsec) / 1000000L;
        if (elapsed >= ms) break;
    }
    printf("spun=%ld\n", ms);
    return 0;
}

int main(int argc, char **argv) {
    if (argc < 2 || strcmp(argv[1], "mask") == 0) return cmd_mask();
    if (strcmp(argv[1], "cpuinfo") == 0) return cmd_cpuinfo();
    if (strcmp(argv[1], "online") == 0) return cmd_online();
    if (strcmp(argv[1], "env") == 0 && argc > 2) return cmd_env(argv[2]);
    if (strcmp(argv[1], "setaffinity") == 0 && argc > 2) return cmd_setaffinity(argv[2]);
    if (strcmp(argv[1], "clamp-drive") == 0 && argc > 2) return cmd_clamp_drive(atoi(argv[2]));
    if (strcmp(argv[1], "threads") == 0 && argc > 2) return cmd_threads(atoi(argv[2]));
    if (strcmp(argv[1], "getcpu") == 0 && argc > 2) return cmd_getcpu(atoi(argv[2]));
    if (strcmp(argv[1], "spin") == 0 && argc > 2) return cmd_spin(atol(argv[2]));
    if (strcmp(argv[1], "exit") == 0 && argc > 2) return atoi(argv[2]);
    if (strcmp(argv[1], "getpid-loop") == 0 && argc > 2) {
        int n = atoi(argv[2]);
        for (int i = 0; i < n; i++) syscall(SYS_getpid);
        printf("getpid=%d\n", n);
        return 0;
    }
    fprintf(stderr, "usage: probe [mask|cpuinfo|online|env NAME|setaffinity LIST|"
                    "clamp-drive N|threads N|getcpu N|spin MS|exit CODE|getpid-loop N]\n");
    return 2;
}

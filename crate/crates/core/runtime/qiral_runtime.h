/* Runtime for code generated by qiralc: lattice geometry, gauge and vector
 * files, stencil application, library bindings and the program skeleton. */
#ifndef QIRAL_RUNTIME_H
#define QIRAL_RUNTIME_H

#include <complex.h>
#include <stddef.h>

typedef double complex qr_cplx;

enum { QR_FULL = 0, QR_EVEN = 1, QR_ODD = 2 };
enum { QR_NESTED = 0, QR_LINEAR = 1 };

#define QR_BLOCK 12
#define QR_REDUCE_BLOCK 64

/* Storage index of component k at site index i of a vector with n sites. */
#define QR_IX(layout, i, k, n) \
    ((layout) == QR_NESTED ? (size_t)(i) * QR_BLOCK + (size_t)(k) : (size_t)(k) * (size_t)(n) + (size_t)(i))

typedef struct {
    int dims[4];
    size_t volume;
    size_t *even, *odd; /* site lists by parity */
    size_t *half;       /* position of each site in its parity list */
} qr_lattice;

typedef struct {
    qr_lattice lat;
    qr_cplx *links; /* 9 entries per (site * 4 + axis), row-major */
} qr_gauge;

typedef struct {
    int axis, neg, dagger;
    int at[4];
} qr_link;

typedef struct {
    int offset[4];
    int nlinks;
    const qr_link *links;
    int mask; /* -1: every site, else required output parity */
} qr_group;

typedef struct {
    int to, from, layout;
    size_t n_to, n_from;
    int ngroups;
    qr_cplx *spin;    /* 16 per group */
    long *input;      /* per group and output index; -1 when nothing is read */
    qr_cplx *color;   /* 9 per group and output index */
    int *has_color;
} qr_stencil;

typedef struct {
    double kappa, mu, epsilon;
    long max_iter;
    unsigned long long gathers; /* set by the solver */
} qr_params;

typedef struct {
    size_t len, cap;
    long *iteration;
    double *residual;
} qr_trace;

typedef int (*qr_solve_fn)(const qr_gauge *g, qr_params *p, qr_cplx *const *in, qr_cplx *out, qr_trace *tr);

typedef struct {
    const char *name;
    int ninputs;
    const char *const *inputs;
    const int *input_dom;
    int output_dom;
    qr_solve_fn solve;
} qr_program;

enum { QR_OK = 0, QR_MAX_ITER = 2, QR_FAILED = 3 };

static inline qr_cplx qr_c(double re, double im)
{
    qr_cplx z;
    ((double *)&z)[0] = re;
    ((double *)&z)[1] = im;
    return z;
}

/* Division by the textbook formula, matching the reference interpreter. */
static inline qr_cplx qr_div(qr_cplx a, qr_cplx b)
{
    double d = creal(b) * creal(b) + cimag(b) * cimag(b);
    return qr_c((creal(a) * creal(b) + cimag(a) * cimag(b)) / d, (cimag(a) * creal(b) - creal(a) * cimag(b)) / d);
}

int qr_finite(qr_cplx z);

int qr_lattice_init(qr_lattice *lat, const int dims[4]);
void qr_lattice_free(qr_lattice *lat);
size_t qr_dom_sites(const qr_lattice *lat, int dom);
size_t qr_coord_offset(const qr_lattice *lat, size_t site, const int off[4]);
int qr_parity(const qr_lattice *lat, size_t site);

int qr_gauge_load(const char *path, qr_gauge *g);
void qr_gauge_free(qr_gauge *g);

qr_cplx *qr_alloc(size_t n);
qr_cplx *qr_vec_load(const char *path, size_t *n);
int qr_vec_save(const char *path, const qr_cplx *v, size_t n);
/* Conversion between site-major files and the in-memory layout. */
void qr_import(qr_cplx *dst, const qr_cplx *src, size_t n, int layout);
void qr_export(qr_cplx *dst, const qr_cplx *src, size_t n, int layout);

void qr_stencil_build(qr_stencil *st, const qr_gauge *g, int to, int from, int layout, const qr_group *groups,
                      int ngroups, const qr_cplx *spin);
void qr_stencil_free(qr_stencil *st);
/* Sum of all groups at output index i; nb and link are scratch. */
void qr_stencil_site(const qr_stencil *st, size_t i, const qr_cplx *src, qr_cplx *acc, qr_cplx *nb, qr_cplx *link);
void qr_store_site(qr_cplx *dst, size_t i, size_t n, int layout, const qr_cplx *acc);

/* Whole-vector C = A * B for a site-local stencil A; the shipped target of
 * the dgemm binding. */
void dgemm(const qr_stencil *A, const qr_cplx *B, qr_cplx *C);

void qr_trace_push(qr_trace *tr, long iteration, double residual);
void qr_trace_free(qr_trace *tr);

int qr_main(int argc, char **argv, const qr_program *prog);

#endif

#include "qiral_runtime.h"

#include <math.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

static void *qr_xmalloc(size_t n)
{
    void *p = calloc(n ? n : 1, 1);
    if (!p) {
        fprintf(stderr, "qiral: out of memory\n");
        exit(QR_FAILED);
    }
    return p;
}

int qr_finite(qr_cplx z)
{
    return isfinite(creal(z)) && isfinite(cimag(z));
}

static void qr_coords(const qr_lattice *lat, size_t s, int c[4])
{
    for (int k = 0; k < 4; k++) {
        c[k] = (int)(s % (size_t)lat->dims[k]);
        s /= (size_t)lat->dims[k];
    }
}

static size_t qr_index(const qr_lattice *lat, const int c[4])
{
    const int *d = lat->dims;
    return (size_t)c[0] + (size_t)d[0] * ((size_t)c[1] + (size_t)d[1] * ((size_t)c[2] + (size_t)d[2] * (size_t)c[3]));
}

int qr_parity(const qr_lattice *lat, size_t site)
{
    int c[4];
    qr_coords(lat, site, c);
    return (c[0] + c[1] + c[2] + c[3]) % 2;
}

size_t qr_coord_offset(const qr_lattice *lat, size_t site, const int off[4])
{
    int c[4];
    qr_coords(lat, site, c);
    for (int k = 0; k < 4; k++) {
        int n = lat->dims[k];
        c[k] = ((c[k] + off[k]) % n + n) % n;
    }
    return qr_index(lat, c);
}

int qr_lattice_init(qr_lattice *lat, const int dims[4])
{
    size_t v = 1;
    for (int k = 0; k < 4; k++) {
        if (dims[k] <= 0 || dims[k] % 2)
            return -1;
        lat->dims[k] = dims[k];
        v *= (size_t)dims[k];
    }
    lat->volume = v;
    lat->even = qr_xmalloc(v / 2 * sizeof(size_t));
    lat->odd = qr_xmalloc(v / 2 * sizeof(size_t));
    lat->half = qr_xmalloc(v * sizeof(size_t));
    size_t ne = 0, no = 0;
    for (size_t s = 0; s < v; s++) {
        if (qr_parity(lat, s)) {
            lat->half[s] = no;
            lat->odd[no++] = s;
        } else {
            lat->half[s] = ne;
            lat->even[ne++] = s;
        }
    }
    return 0;
}

void qr_lattice_free(qr_lattice *lat)
{
    free(lat->even);
    free(lat->odd);
    free(lat->half);
}

size_t qr_dom_sites(const qr_lattice *lat, int dom)
{
    return dom == QR_FULL ? lat->volume : lat->volume / 2;
}

static size_t qr_dom_site(const qr_lattice *lat, int dom, size_t i)
{
    switch (dom) {
    case QR_EVEN:
        return lat->even[i];
    case QR_ODD:
        return lat->odd[i];
    default:
        return i;
    }
}

static int qr_read_header(FILE *f, char *buf, size_t cap)
{
    size_t k = 0;
    int ch;
    while ((ch = fgetc(f)) != EOF && ch != '\n') {
        if (k + 1 >= cap)
            return -1;
        buf[k++] = (char)ch;
    }
    buf[k] = 0;
    return ch == '\n' ? 0 : -1;
}

/* Files store little-endian doubles; this assumes a little-endian host. */
static int qr_read_complex(FILE *f, qr_cplx *dst, size_t n)
{
    return fread(dst, sizeof(double) * 2, n, f) == n ? 0 : -1;
}

int qr_gauge_load(const char *path, qr_gauge *g)
{
    FILE *f = fopen(path, "rb");
    if (!f)
        return -1;
    char head[256];
    int d[4];
    if (qr_read_header(f, head, sizeof head) || sscanf(head, "QGAUGE1 %d %d %d %d", &d[0], &d[1], &d[2], &d[3]) != 4 ||
        qr_lattice_init(&g->lat, d)) {
        fclose(f);
        return -1;
    }
    size_t n = g->lat.volume * 4 * 9;
    g->links = qr_alloc(n);
    int rc = qr_read_complex(f, g->links, n);
    fclose(f);
    return rc;
}

void qr_gauge_free(qr_gauge *g)
{
    qr_lattice_free(&g->lat);
    free(g->links);
}

qr_cplx *qr_alloc(size_t n)
{
    return qr_xmalloc(n * sizeof(qr_cplx));
}

qr_cplx *qr_vec_load(const char *path, size_t *n)
{
    FILE *f = fopen(path, "rb");
    if (!f)
        return NULL;
    char head[128];
    if (qr_read_header(f, head, sizeof head) || sscanf(head, "QVEC1 %zu", n) != 1) {
        fclose(f);
        return NULL;
    }
    qr_cplx *v = qr_alloc(*n);
    if (qr_read_complex(f, v, *n)) {
        free(v);
        v = NULL;
    }
    fclose(f);
    return v;
}

int qr_vec_save(const char *path, const qr_cplx *v, size_t n)
{
    FILE *f = fopen(path, "wb");
    if (!f)
        return -1;
    fprintf(f, "QVEC1 %zu\n", n);
    size_t w = fwrite(v, sizeof(double) * 2, n, f);
    return fclose(f) == 0 && w == n ? 0 : -1;
}

void qr_import(qr_cplx *dst, const qr_cplx *src, size_t n, int layout)
{
    for (size_t i = 0; i < n; i++)
        for (int k = 0; k < QR_BLOCK; k++)
            dst[QR_IX(layout, i, k, n)] = src[i * QR_BLOCK + (size_t)k];
}

void qr_export(qr_cplx *dst, const qr_cplx *src, size_t n, int layout)
{
    for (size_t i = 0; i < n; i++)
        for (int k = 0; k < QR_BLOCK; k++)
            dst[i * QR_BLOCK + (size_t)k] = src[QR_IX(layout, i, k, n)];
}

static void su3_mul(const qr_cplx *a, const qr_cplx *b, qr_cplx *c)
{
    for (int i = 0; i < 3; i++)
        for (int j = 0; j < 3; j++) {
            qr_cplx z = 0;
            for (int k = 0; k < 3; k++)
                z += a[3 * i + k] * b[3 * k + j];
            c[3 * i + j] = z;
        }
}

static void su3_dagger(const qr_cplx *a, qr_cplx *c)
{
    for (int i = 0; i < 3; i++)
        for (int j = 0; j < 3; j++)
            c[3 * i + j] = conj(a[3 * j + i]);
}

/* U(axis) at `site`, or U(-axis) = U(axis)[site - axis]^dagger. */
static void signed_link(const qr_gauge *g, size_t site, int axis, int neg, qr_cplx *out)
{
    if (neg) {
        int back[4] = {0, 0, 0, 0};
        back[axis] = -1;
        size_t s = qr_coord_offset(&g->lat, site, back);
        su3_dagger(g->links + (s * 4 + (size_t)axis) * 9, out);
    } else {
        memcpy(out, g->links + (site * 4 + (size_t)axis) * 9, 9 * sizeof(qr_cplx));
    }
}

void qr_stencil_build(qr_stencil *st, const qr_gauge *g, int to, int from, int layout, const qr_group *groups,
                      int ngroups, const qr_cplx *spin)
{
    const qr_lattice *lat = &g->lat;
    st->to = to;
    st->from = from;
    st->layout = layout;
    st->n_to = qr_dom_sites(lat, to);
    st->n_from = qr_dom_sites(lat, from);
    st->ngroups = ngroups;
    st->spin = qr_alloc((size_t)ngroups * 16);
    memcpy(st->spin, spin, (size_t)ngroups * 16 * sizeof(qr_cplx));
    st->input = qr_xmalloc((size_t)ngroups * st->n_to * sizeof(long));
    st->color = qr_alloc((size_t)ngroups * st->n_to * 9);
    st->has_color = qr_xmalloc((size_t)ngroups * sizeof(int));
    for (int gi = 0; gi < ngroups; gi++) {
        const qr_group *gr = &groups[gi];
        st->has_color[gi] = gr->nlinks > 0;
        for (size_t i = 0; i < st->n_to; i++) {
            size_t s = qr_dom_site(lat, to, i);
            size_t n = qr_coord_offset(lat, s, gr->offset);
            long idx = -1;
            if (gr->mask < 0 || qr_parity(lat, s) == gr->mask) {
                if (from == QR_FULL)
                    idx = (long)n;
                else if (qr_parity(lat, n) == (from == QR_ODD))
                    idx = (long)lat->half[n];
            }
            st->input[(size_t)gi * st->n_to + i] = idx;
            if (!gr->nlinks)
                continue;
            qr_cplx u[9], m[9], t[9];
            for (int l = 0; l < gr->nlinks; l++) {
                const qr_link *lk = &gr->links[l];
                signed_link(g, qr_coord_offset(lat, s, lk->at), lk->axis, lk->neg, m);
                if (lk->dagger) {
                    su3_dagger(m, t);
                    memcpy(m, t, sizeof m);
                }
                if (l == 0) {
                    memcpy(u, m, sizeof u);
                } else {
                    su3_mul(u, m, t);
                    memcpy(u, t, sizeof u);
                }
            }
            memcpy(st->color + ((size_t)gi * st->n_to + i) * 9, u, sizeof u);
        }
    }
}

void qr_stencil_free(qr_stencil *st)
{
    free(st->spin);
    free(st->input);
    free(st->color);
    free(st->has_color);
}

void qr_stencil_site(const qr_stencil *st, size_t i, const qr_cplx *src, qr_cplx *acc, qr_cplx *nb, qr_cplx *link)
{
    for (int k = 0; k < QR_BLOCK; k++)
        acc[k] = 0;
    for (int gi = 0; gi < st->ngroups; gi++) {
        long j = st->input[(size_t)gi * st->n_to + i];
        if (j < 0)
            continue;
        if (st->has_color[gi]) {
            memcpy(link, st->color + ((size_t)gi * st->n_to + i) * 9, 9 * sizeof(qr_cplx));
            for (int a = 0; a < 3; a++)
                for (int s = 0; s < 4; s++) {
                    qr_cplx z = 0;
                    for (int b = 0; b < 3; b++)
                        z += link[a * 3 + b] * src[QR_IX(st->layout, j, b * 4 + s, st->n_from)];
                    nb[a * 4 + s] = z;
                }
        } else {
            for (int k = 0; k < QR_BLOCK; k++)
                nb[k] = src[QR_IX(st->layout, j, k, st->n_from)];
        }
        const qr_cplx *m = st->spin + (size_t)gi * 16;
        for (int a = 0; a < 3; a++)
            for (int s = 0; s < 4; s++) {
                qr_cplx z = 0;
                for (int t = 0; t < 4; t++)
                    z += m[s * 4 + t] * nb[a * 4 + t];
                acc[a * 4 + s] += z;
            }
    }
}

void qr_store_site(qr_cplx *dst, size_t i, size_t n, int layout, const qr_cplx *acc)
{
    for (int k = 0; k < QR_BLOCK; k++)
        dst[QR_IX(layout, i, k, n)] = acc[k];
}

void dgemm(const qr_stencil *A, const qr_cplx *B, qr_cplx *C)
{
    long n = (long)A->n_to;
#pragma omp parallel for schedule(static)
    for (long i = 0; i < n; i++) {
        qr_cplx acc[QR_BLOCK], nb[QR_BLOCK], link[9];
        qr_stencil_site(A, (size_t)i, B, acc, nb, link);
        qr_store_site(C, (size_t)i, A->n_to, A->layout, acc);
    }
}

void qr_trace_push(qr_trace *tr, long iteration, double residual)
{
    if (tr->len == tr->cap) {
        tr->cap = tr->cap ? tr->cap * 2 : 64;
        tr->iteration = realloc(tr->iteration, tr->cap * sizeof(long));
        tr->residual = realloc(tr->residual, tr->cap * sizeof(double));
        if (!tr->iteration || !tr->residual) {
            fprintf(stderr, "qiral: out of memory\n");
            exit(QR_FAILED);
        }
    }
    tr->iteration[tr->len] = iteration;
    tr->residual[tr->len] = residual;
    tr->len++;
}

void qr_trace_free(qr_trace *tr)
{
    free(tr->iteration);
    free(tr->residual);
}

static int usage(const char *prog)
{
    fprintf(stderr, "usage: %s GAUGE OUT KAPPA MU EPSILON MAX_ITER INPUT... [--report CSV]\n", prog);
    return QR_FAILED;
}

int qr_main(int argc, char **argv, const qr_program *prog)
{
    const char *report = NULL;
    if (argc >= 3 && strcmp(argv[argc - 2], "--report") == 0) {
        report = argv[argc - 1];
        argc -= 2;
    }
    if (argc != 7 + prog->ninputs)
        return usage(argv[0]);
    qr_gauge g;
    if (qr_gauge_load(argv[1], &g)) {
        fprintf(stderr, "qiral: cannot read gauge file %s\n", argv[1]);
        return QR_FAILED;
    }
    qr_params p;
    p.kappa = strtod(argv[3], NULL);
    p.mu = strtod(argv[4], NULL);
    p.epsilon = strtod(argv[5], NULL);
    p.max_iter = strtol(argv[6], NULL, 10);
    p.gathers = 0;
    qr_cplx **in = qr_xmalloc((size_t)(prog->ninputs + 1) * sizeof(qr_cplx *));
    for (int k = 0; k < prog->ninputs; k++) {
        size_t n = 0, want = qr_dom_sites(&g.lat, prog->input_dom[k]) * QR_BLOCK;
        in[k] = qr_vec_load(argv[7 + k], &n);
        if (!in[k] || n != want) {
            fprintf(stderr, "qiral: input %s needs %zu entries from %s\n", prog->inputs[k], want, argv[7 + k]);
            return QR_FAILED;
        }
    }
    size_t nout = qr_dom_sites(&g.lat, prog->output_dom) * QR_BLOCK;
    qr_cplx *out = qr_alloc(nout);
    qr_trace tr = {0, 0, NULL, NULL};
    int status = prog->solve(&g, &p, in, out, &tr);
    if (status != QR_FAILED && qr_vec_save(argv[2], out, nout)) {
        fprintf(stderr, "qiral: cannot write %s\n", argv[2]);
        status = QR_FAILED;
    }
    FILE *csv = report ? fopen(report, "w") : stdout;
    if (!csv) {
        fprintf(stderr, "qiral: cannot write %s\n", report);
        status = QR_FAILED;
    } else {
        fprintf(csv, "iteration,residual\n");
        for (size_t k = 0; k < tr.len; k++)
            fprintf(csv, "%ld,%.17g\n", tr.iteration[k], tr.residual[k]);
        if (report)
            fclose(csv);
    }
    fprintf(stderr, "iterations %zu\ndirac_applications %llu\n", tr.len, p.gathers);
    for (int k = 0; k < prog->ninputs; k++)
        free(in[k]);
    free(in);
    free(out);
    qr_trace_free(&tr);
    qr_gauge_free(&g);
    return status;
}

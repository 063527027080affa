"""Smoke test for the `qiral` extension module.

Build and stage the module first:
    cargo build -p qiral-py --release
    cp target/release/libqiral_py.so python/qiral.so
"""

import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import qiral  # noqa: E402


def norm(v):
    return sum(abs(z) ** 2 for z in v) ** 0.5


def main():
    s = qiral.Session()
    assert "CGNR" in s.algorithms()
    assert qiral.pretty("A  *  (B+C)") == "A * (B + C)"

    gauge = qiral.Gauge.random([2, 2, 2, 2], 42)
    b = qiral.random_vector(gauge.vector_len, 43)

    ir = s.compile(["SCHUR", "CGNR"], layout="linear")
    assert ir.layout == "linear"
    out = qiral.run(ir, gauge, b, epsilon=1e-20)
    assert out["converged"], out["trace"][-3:]

    apply = s.compile_stmt("x = Dirac * b")
    dx = qiral.run(apply, gauge, out["x"])["x"]
    residual = norm([p - q for p, q in zip(dx, b)]) / norm(b)
    assert residual < 1e-7, residual

    dense = s.dense("Dirac", gauge)
    row0 = sum(dense[0][j] * out["x"][j] for j in range(len(b)))
    assert abs(row0 - b[0]) < 1e-6

    assert "#pragma omp parallel for" in ir.emit_c("schur_cgnr", dgemm=True)
    print(f"ok: {len(out['trace'])} iterations, relative residual {residual:.2e}")


if __name__ == "__main__":
    main()

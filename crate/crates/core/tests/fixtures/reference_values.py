"""Independent numpy reference for tests/golden.rs.

Builds a formula-defined instance (no random numbers), decorrelates by
explicit projections, forms A_j = E_xz (E_zz^{1/2})^+ from an eigh-based
square root and reads every quantity off numpy's SVD. Run with
`python3 reference_values.py` and paste the printed constants.
"""

import numpy as np

N, n = 16, 3
k = np.arange(N)
y = np.array([np.sin(0.7 * (i + 1) * (k + 1) + 0.3 * i) for i in range(n)])
x = np.array([
    np.tanh(y[0] + 0.5 * y[1]),
    y[0] * y[2] + 0.2 * np.cos(k),
    y[1] ** 2 - 0.3 * y[2],
])


def cov(a, b):
    return a @ b.T / N


def pinv_psd(e, root=False):
    w, v = np.linalg.eigh(e)
    keep = w > max(e.shape) * np.finfo(float).eps * max(w.max(), 0.0)
    f = 1.0 / np.sqrt(w[keep]) if root else 1.0 / w[keep]
    return (v[:, keep] * f) @ v[:, keep].T


def decorrelate(v):
    z = []
    for vj in v:
        zj = vj.copy()
        for zk in z:
            zj = zj - cov(vj, zk) @ np.linalg.pinv(cov(zk, zk), rcond=1e-13, hermitian=True) @ zk
        z.append(zj)
    return z


def a_matrix(zj):
    return cov(x, zj) @ pinv_psd(cov(zj, zj), root=True)


def report(name, degree, ranks):
    v = [y] + [y ** d for d in degree]
    z = decorrelate(v)
    tr = np.trace(cov(x, x))
    svals, gains = [], []
    captured, total = 0.0, 0.0
    for j, zj in enumerate(z):
        a = a_matrix(zj)
        u, s, vt = np.linalg.svd(a, full_matrices=False)
        svals.append(s)
        captured += np.sum(s[: ranks[j]] ** 2)
        total += np.sum(s ** 2)
        b = a - (u[:, : ranks[j]] * s[: ranks[j]]) @ vt[: ranks[j]]
        if j >= 1:
            gains.append(np.sum(a ** 2, axis=0) - np.sum(b ** 2, axis=0))
    print(f"// {name}")
    print(f"const {name}_TRACE: f64 = {float(tr)!r};")
    print(f"const {name}_ERROR: f64 = {float(tr - captured)!r};")
    print(f"const {name}_FULL: f64 = {float(tr - total)!r};")
    for j, s in enumerate(svals):
        print(f"const {name}_SV{j}: [f64; {len(s)}] = [{', '.join(repr(float(t)) for t in s)}];")
    for j, g in enumerate(gains, start=1):
        print(f"const {name}_GAINS{j}: [f64; {len(g)}] = [{', '.join(repr(float(t)) for t in g)}];")
    if len(ranks) > 1:
        l0 = sum(ranks)
        lhs = np.sum(svals[0][ranks[0]:l0] ** 2)
        rhs = sum(np.sum(svals[j][: ranks[j]] ** 2) for j in range(1, len(ranks)))
        print(f"const {name}_SPLIT0: [f64; 2] = [{float(lhs)!r}, {float(rhs)!r}];")


report("QUAD", [2], [2, 1])
report("CUBIC", [2, 3], [1, 1, 1])

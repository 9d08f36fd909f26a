"""A tour of the matrix tape: forward, backward, and gradient checking.

Everything downstream (classifier adaptation, the query-adaptive
transformer, meta-training) runs on this engine, so it pays to see it
naked once: build a graph, run one backward pass, and compare against
central finite differences.
"""

import numpy as np

from fstal import autodiff as ad

print("=" * 64)
print("1. a tiny graph: loss = sum(log(sigmoid(3 * cos_rows(X @ W, v))))")
print("=" * 64)

rng = np.random.default_rng(0)
x_val = rng.normal(size=(4, 5))
w_val = rng.normal(size=(5, 3))
v_val = rng.normal(size=(1, 3))

tape = ad.Tape()
x = tape.leaf(x_val, requires_grad=True, name="x")
w = tape.leaf(w_val, requires_grad=True, name="w")
v = tape.leaf(v_val, requires_grad=True, name="v")

h = ad.matmul(x, w)                     # 4x3
c = ad.cosine_rows(h, v)                # 4x1, each row vs the single row v
p = ad.sigmoid(ad.scale(c, 3.0))        # squashed scores
loss = ad.sum_all(ad.log(p))            # scalar, as a 1x1 matrix

print(f"loss value: {loss.value[0, 0]:+.6f}")
tape.backward(loss)
print(f"d loss / d v = {np.array2string(v.grad, precision=4)}")
print(f"|d loss / d x| = {np.linalg.norm(x.grad):.4f} "
      f"(shape {x.grad.shape})")

print()
print("=" * 64)
print("2. the tape records ops in order; backward walks it once, reversed")
print("=" * 64)
print(f"nodes on tape: {len(tape.nodes)}")
print("op sequence:", " -> ".join(n.name or "leaf" for n in tape.nodes))

print()
print("=" * 64)
print("3. gradient checking against central finite differences")
print("=" * 64)


def build(tape, nodes):
    h = ad.matmul(nodes["x"], nodes["w"])
    c = ad.cosine_rows(h, nodes["v"])
    p = ad.sigmoid(ad.scale(c, 3.0))
    return ad.sum_all(ad.log(p))


report = ad.grad_check(build, {"x": x_val, "w": w_val, "v": v_val},
                       step=1e-5, tolerance=1e-6)
for name, err in report.per_input.items():
    print(f"  {name}: max rel error {err:.3e}")
print(f"passed at 1e-6: {report.passed}")

print()
print("=" * 64)
print("4. a deliberately broken rule is caught immediately")
print("=" * 64)


def broken_scale(a, c):
    # claims d/da (c*a) = 2c; the checker should flag it
    return a.tape.record(a.value * c, (a,), lambda g: (g * 2.0 * c,))


bad = ad.grad_check(lambda t, n: ad.sum_all(broken_scale(n["x"], 3.0)),
                    {"x": rng.normal(size=(2, 2))})
print(f"broken rule max rel error: {bad.max_rel_error:.3f} "
      f"-> passed: {bad.passed}")

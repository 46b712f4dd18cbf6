import numpy as np
import pytest

from glucocrnn import tensor as T


def fd_check(loss_fn, arrays, grads, h=1e-4, pattern_fn=None):
    """Central-difference check of ``grads``; returns ``(worst, checked, skipped)``.

    ``loss_fn()`` reads the current contents of ``arrays``; entries are
    perturbed in place and restored.  With ``pattern_fn`` (returning the
    branch pattern of every kink: relu masks, pool argmax, residual signs),
    entries whose +-h evaluations leave the smooth piece of the base point
    are skipped, since central differences are meaningless across a kink.
    """
    base = None if pattern_fn is None else pattern_fn()
    worst, checked, skipped = 0.0, 0, 0
    for arr, g in zip(arrays, grads):
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            up = float(loss_fn())
            same = base is None or np.array_equal(pattern_fn(), base)
            flat[j] = old - h
            dn = float(loss_fn())
            same = same and (base is None or np.array_equal(pattern_fn(), base))
            flat[j] = old
            if not same:
                skipped += 1
                continue
            num = (up - dn) / (2 * h)
            den = max(abs(num), abs(gflat[j]), 1e-6)
            worst = max(worst, abs(num - gflat[j]) / den)
            checked += 1
    return worst, checked, skipped


def fd_max_rel_err(loss_fn, arrays, grads, h=1e-4):
    return fd_check(loss_fn, arrays, grads, h)[0]


def branch_pattern(model, X, y):
    """Every discrete choice the network makes on inputs ``X`` with targets ``y``."""
    spec = model.spec
    w = {n: v.value for n, v in model.vars.items()}
    parts = []
    h = X
    if spec.uses_cnn:
        for j in range(1, len(spec.conv) + 1):
            z = T.conv1d(h, w[f"conv{j}.kernel"], w[f"conv{j}.bias"])
            parts.append((z > 0).ravel())
            h, arg = T.maxpool1d(np.maximum(z, 0), spec.pool, spec.pool)
            parts.append(arg.ravel())
    out = model.forward_raw(X)
    # hidden dense pre-activations, recomputed from the layer input
    v = _dense_input(model, X)
    for j in range(1, len(spec.dense)):
        a = v @ w[f"dense{j}.W"].T + w[f"dense{j}.b"]
        parts.append((a > 0).ravel())
        v = np.maximum(a, 0) if spec.hidden_act == "relu" else np.tanh(a)
    parts.append(np.sign(out - y).ravel())
    return np.concatenate([np.asarray(p, dtype=np.int64) for p in parts])


def _dense_input(model, X):
    """Input of the first dense layer (inference mode)."""
    first = model.vars["dense1.W"]
    captured = {}
    orig = T.dense

    def spy(x, W, b, act="linear", tape=None):
        if W is first and "x" not in captured:
            captured["x"] = np.asarray(x.value if isinstance(x, T.Var) else x)
        return orig(x, W, b, act, tape=tape)

    T.dense = spy
    try:
        model.forward_raw(X)
    finally:
        T.dense = orig
    return captured["x"]


def tape_grads(build_loss, params):
    """Run ``build_loss(tape, vars)`` and return grads for ``params`` (arrays)."""
    tape = T.Tape()
    vs = [T.Var(p) for p in params]
    loss = build_loss(tape, vs)
    return T.backward(tape, loss, vs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --------------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the run

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)

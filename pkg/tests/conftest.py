import numpy as np
import pytest

from evstream.events import EVENT_DTYPE, SensorGeometry
from evstream.lut import build_local_lut, build_lut
from evstream.nn import MlpModel

TINY_SIZES = {"mlp1": (8, 8), "mlp2": (8, 16, None),
              "mlp3": (16, 8, None), "mlp4": (16, 8, None)}


def tiny_model(k=16, seed=1, n_classes=2, reg_out=2, pointnet=False):
    return MlpModel.create(k=k, n_classes=n_classes, reg_out=reg_out,
                           sizes=TINY_SIZES, pointnet=pointnet, seed=seed)


def random_events(rng, geometry, n, t0=0, max_gap=400):
    arr = np.empty(n, dtype=EVENT_DTYPE)
    arr["t"] = t0 + np.cumsum(rng.integers(0, max_gap, n))
    arr["x"] = rng.integers(0, geometry.width, n)
    arr["y"] = rng.integers(0, geometry.height, n)
    arr["p"] = rng.choice(np.array([-1, 1], dtype=np.int8), n)
    return arr


def make_random_batch(rng, geometry, tau_us, n_windows, max_events=25,
                      min_events=5, pointnet=False, n_classes=2, reg_out=2):
    """Random labeled window batch for graph tests."""
    from evstream.graph import make_window_batch

    chunks, anchors = [], []
    for _ in range(n_windows):
        n = int(rng.integers(min_events, max_events + 1))
        arr = np.empty(n, dtype=EVENT_DTYPE)
        t0 = int(rng.integers(0, 10 * tau_us))
        arr["t"] = np.sort(rng.integers(t0, t0 + tau_us - 1, n))
        arr["x"] = rng.integers(0, geometry.width, n)
        arr["y"] = rng.integers(0, geometry.height, n)
        arr["p"] = rng.choice(np.array([-1, 1], dtype=np.int8), n)
        chunks.append(arr)
        anchors.append(int(arr["t"][-1]))
    offsets = np.cumsum([0] + [len(c) for c in chunks])
    flat = np.concatenate(chunks)
    labels = rng.integers(0, n_classes, len(flat))
    targets = rng.standard_normal((n_windows, reg_out))
    mode = "pointnet" if pointnet else "full"
    return make_window_batch(flat, anchors, offsets, geometry, tau_us,
                             mode=mode, labels=labels, targets=targets)


def gradient_check(model, batch, mode="full", heads=("global", "eventwise"),
                   per_param_samples=None, h=1e-5, atol=1e-7):
    """Worst relative error of backprop vs central finite differences.

    Gradients whose absolute disagreement is below ``atol`` pass outright:
    at loss scale ~1, the finite-difference noise floor is ~1e-10, so a pure
    relative comparison is meaningless for analytically-zero gradients.
    ``per_param_samples=None`` checks every scalar parameter.
    """
    from evstream.graph import forward, forward_backward
    from evstream.nn import softmax_cross_entropy, squared_error

    def loss_only():
        outputs, _ = forward(model, batch, mode, heads, training=True)
        total = 0.0
        if "global" in heads:
            total += squared_error(outputs["global"], batch.targets)[0]
        if "eventwise" in heads:
            total += softmax_cross_entropy(outputs["eventwise"], batch.labels)[0]
        return total

    _, _, grads, _ = forward_backward(model, batch, mode, heads)
    params = model.parameters()
    worst = 0.0
    pick = np.random.default_rng(0)
    for pi, p in enumerate(params):
        flat = p.ravel()
        if per_param_samples is None or per_param_samples >= flat.size:
            js = range(flat.size)
        else:
            js = pick.choice(flat.size, size=per_param_samples, replace=False)
        for j in js:
            orig = flat[j]
            flat[j] = orig + h
            lp = loss_only()
            flat[j] = orig - h
            lm = loss_only()
            flat[j] = orig
            fd = (lp - lm) / (2 * h)
            an = grads[pi].ravel()[j]
            if abs(fd - an) <= atol:
                continue
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an)))
    return worst


@pytest.fixture(scope="session")
def small_geometry():
    return SensorGeometry(16, 16)


@pytest.fixture(scope="session")
def small_model():
    return tiny_model(k=16, seed=1)


@pytest.fixture(scope="session")
def small_lut(small_model, small_geometry):
    return build_lut(small_model, small_geometry)


@pytest.fixture(scope="session")
def small_local_lut(small_model, small_geometry):
    return build_local_lut(small_model, small_geometry)

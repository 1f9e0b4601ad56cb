"""Shared oracles for the test suite."""
import numpy as np

from splitproj.nn import BatchNorm, Conv2d, Dense, Flatten, MaxPool2d, Network, ReLU, Reshape


def rel_err(a, b) -> float:
    a = np.ravel(np.asarray(a, dtype=np.float64))
    b = np.ravel(np.asarray(b, dtype=np.float64))
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def central_diff(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (modified in place, restored)."""
    g = np.zeros(x.shape)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def network_gradcheck(net: Network, x: np.ndarray, seed: np.ndarray, h: float = 1e-3):
    """Return ``(param_errs, input_err)`` for ``L = sum(seed * net(x))`` on a float64 net."""
    assert net.dtype == np.float64
    x = np.array(x, dtype=np.float64)

    def loss():
        # buffers such as BN running stats change in train mode; they do not
        # feed the train-mode output, so repeated forwards are consistent
        return float(np.sum(seed * net.forward(x)[0]))

    net.zero_grad()
    out, tape = net.forward(x)
    grads, gx = net.backward_from_seed(tape, seed)
    grads = {k: v.copy() for k, v in grads.items()}
    errs = {}
    for i, layer in enumerate(net.layers):
        for name, p in layer.params.items():
            fd = central_diff(loss, p, h)
            errs[f"{i}.{layer.kind}.{name}"] = rel_err(grads[f"{i}.{layer.kind}.{name}"], fd)
    fd_x = central_diff(loss, x, h)
    return errs, rel_err(gx, fd_x)


def layer_instances(gen: np.random.Generator):
    """One random (network, input) case per layer kind, float64."""
    seed = int(gen.integers(1 << 31))
    b = int(gen.integers(2, 5))
    n_in, n_out = int(gen.integers(2, 7)), int(gen.integers(2, 7))
    c, hw = int(gen.integers(1, 3)), int(gen.integers(4, 7))
    cases = {
        "dense": (Network([Dense(n_in, n_out, rng=seed)], (n_in,), dtype=np.float64),
                  gen.standard_normal((b, n_in))),
        "dense_nobias": (Network([Dense(n_in, n_out, bias=False, rng=seed)], (n_in,), dtype=np.float64),
                         gen.standard_normal((b, n_in))),
        "conv": (Network([Conv2d(c, 2, 3, stride=int(gen.integers(1, 3)), padding=int(gen.integers(0, 2)),
                                 rng=seed)], (c, hw, hw), dtype=np.float64),
                 gen.standard_normal((b, c, hw, hw))),
        # inputs kept away from the kink at zero so finite differences stay on one side
        "relu": (Network([ReLU()], (n_in,), dtype=np.float64),
                 np.sign(gen.standard_normal((b, n_in))) * gen.uniform(0.1, 1.0, (b, n_in))),
        # distinct values (well separated) so the max in each window is unambiguous
        "maxpool": (Network([MaxPool2d(2)], (c, 4, 4), dtype=np.float64),
                    gen.permutation(b * c * 16).reshape(b, c, 4, 4) * 0.05),
        "batchnorm1d": (Network([BatchNorm(n_in)], (n_in,), dtype=np.float64),
                        gen.standard_normal((b + 2, n_in))),
        "batchnorm2d": (Network([BatchNorm(c)], (c, 3, 3), dtype=np.float64),
                        gen.standard_normal((b, c, 3, 3))),
        "flatten": (Network([Flatten()], (c, 2, 3), dtype=np.float64), gen.standard_normal((b, c, 2, 3))),
        "reshape": (Network([Reshape((3, 2))], (6,), dtype=np.float64), gen.standard_normal((b, 6))),
    }
    for net, x in cases.values():
        for layer in net.layers:
            for p in layer.params.values():
                p[...] = p + 0.1 * gen.standard_normal(p.shape)
    return cases


def stack_instance(gen: np.random.Generator):
    """A 3-layer stack with every activation away from ReLU kinks is not guaranteed; use smooth-ish sizes."""
    seed = int(gen.integers(1 << 31))
    n = int(gen.integers(3, 6))
    net = Network([Dense(n, 5, rng=seed), ReLU(), Dense(5, 3, rng=seed + 1)], (n,), dtype=np.float64)
    return net, gen.standard_normal((3, n))


def toy_system(kind="projection", lam=0.0, mode="LS-F", seed=0, n_clients=3, d=16, k=4,
               rule="adam", lr=1e-2, ownership="SCH", batch=6, in_dim=8, classes=3):
    """A small split system (``d`` <= 64) on random data, nothing connected yet."""
    from splitproj.models import build_split_model
    from splitproj.protocol import ClientModel, ClientState, CutConfig, OptimSpec, server_setup
    from splitproj.wcc import WccConfig

    gen = np.random.default_rng(seed)
    x = gen.standard_normal((n_clients * 12, in_dim)).astype(np.float32)
    y = np.arange(len(x)) % classes
    model = build_split_model("mlp", (in_dim,), classes, 1, d, rng=seed)
    cut = CutConfig(kind, k=k if kind == "projection" else None, cr=None, mode=mode, hidden=8,
                    seed=seed + 17)
    optim = OptimSpec(rule, lr)
    server = server_setup(model.backbone, model.cut_shape, cut, range(n_clients), optim)
    shared = ClientModel(model.head, model.tail, cut, optim)
    clients = []
    for i in range(n_clients):
        cm = shared if ownership == "SCH" else ClientModel(model.head.clone(), model.tail.clone(), cut, optim)
        clients.append(ClientState(i, cm, x[i::n_clients], y[i::n_clients], batch, WccConfig(lam),
                                   rng=1000 * seed + i))
    return model, server, clients

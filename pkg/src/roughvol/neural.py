"""Learning the forward variance curve with a small feedforward network.

The curve xi0(t; theta) is a 1-100-100-100-1 leaky-ReLU MLP with a
softplus output so the curve stays positive.  Training minimizes the
empirical Wasserstein-1 distance between terminal prices of the neural
simulation and a data batch.  Differentiation is reverse-mode on a tape
of numpy array operations: the simulation touches theta only through the
per-step curve values, the Volterra path and the Brownian increments are
constant inputs, and the W1 loss routes +-1/m subgradients through the
sort permutation (sorting is piecewise constant, differentiable a.e.).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import sampler
from .kernel import SoeApprox
from .metrics import wasserstein_p
from .model import RBergomiParams
from .pricing import price_european


class TrainingDivergence(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# tape


class Tensor:
    """Node of the recorded computation graph."""

    __slots__ = ("value", "parents", "grad")

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=float)
        self.parents = parents  # tuple of (Tensor, vjp callable)
        self.grad = None


def _leaf(value) -> Tensor:
    return Tensor(value)


def t_matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value @ b.value)
    out.parents = (
        (a, lambda g: g @ b.value.T),
        (b, lambda g: a.value.T @ g),
    )
    return out


def t_add_bias(a: Tensor, b: Tensor) -> Tensor:
    """(K, W) + (W,) with gradient summed over rows for the bias."""
    out = Tensor(a.value + b.value)
    out.parents = ((a, lambda g: g), (b, lambda g: g.sum(axis=0)))
    return out


def t_leaky_relu(a: Tensor, slope: float) -> Tensor:
    mask = a.value > 0.0
    out = Tensor(np.where(mask, a.value, slope * a.value))
    out.parents = ((a, lambda g: g * np.where(mask, 1.0, slope)),)
    return out


def t_softplus(a: Tensor) -> Tensor:
    out = Tensor(np.logaddexp(0.0, a.value))
    out.parents = ((a, lambda g: g * expit(a.value)),)
    return out


def t_take(a: Tensor, idx: int) -> Tensor:
    """Scalar element of a vector tensor."""
    out = Tensor(a.value[idx])

    def vjp(g):
        full = np.zeros_like(a.value)
        full[idx] = np.sum(g)
        return full

    out.parents = ((a, vjp),)
    return out


def t_mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    out = Tensor(a.value * c)

    def vjp(g):
        ga = g * c
        return ga if ga.shape == a.value.shape else np.sum(ga)

    out.parents = ((a, vjp),)
    return out


def t_mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value * b.value)
    out.parents = ((a, lambda g: g * b.value), (b, lambda g: g * a.value))
    return out


def t_sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value - b.value)
    out.parents = ((a, lambda g: g), (b, lambda g: -g))
    return out


def t_sqrt(a: Tensor) -> Tensor:
    root = np.sqrt(a.value)
    out = Tensor(root)
    out.parents = ((a, lambda g: g * 0.5 / root),)
    return out


def t_exp(a: Tensor) -> Tensor:
    e = np.exp(a.value)
    out = Tensor(e)
    out.parents = ((a, lambda g: g * e),)
    return out


def t_mean(a: Tensor) -> Tensor:
    m = a.value.size
    out = Tensor(a.value.mean())
    out.parents = ((a, lambda g: np.full_like(a.value, float(g) / m)),)
    return out


def t_w1(generated: Tensor, data: np.ndarray) -> Tensor:
    """Empirical W1 against a constant sample batch of equal size."""
    x = generated.value
    y = np.asarray(data, dtype=float)
    if x.size != y.size:
        raise ValueError(f"sample counts differ: {x.size} vs {y.size}")
    order = np.argsort(x, kind="stable")
    signs = np.sign(x[order] - np.sort(y, kind="stable"))
    route = np.empty_like(x)
    route[order] = signs / x.size
    out = Tensor(np.mean(np.abs(x[order] - np.sort(y, kind="stable"))))
    out.parents = ((generated, lambda g: float(g) * route),)
    return out


def backward(root: Tensor, leaves: list[Tensor]) -> list[np.ndarray]:
    """Replay the tape backward; returns gradients for the given leaves."""
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    for node in topo:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(topo):
        if node.grad is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(node.grad)
            parent.grad = contrib if parent.grad is None else parent.grad + contrib
    return [
        leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
        for leaf in leaves
    ]


# ---------------------------------------------------------------------------
# network


@dataclass
class Mlp:
    """Width-100, 3-hidden-layer leaky-ReLU network with softplus output."""

    weights: list[np.ndarray]
    widths: tuple[int, ...] = (1, 100, 100, 100, 1)
    slope: float = 0.01

    @staticmethod
    def initialize(seed: int, widths=(1, 100, 100, 100, 1), slope=0.01,
                   out_level: float = 0.1) -> "Mlp":
        """Fan-in scaled Gaussian init adapted for leaky ReLU.

        The output layer starts small with its bias at softplus^-1 of
        `out_level`, so the initial curve is a sane flat variance level
        and early gradients do not vanish.
        """
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, 707))))
        ws: list[np.ndarray] = []
        gain = np.sqrt(2.0 / (1.0 + slope * slope))
        for i in range(len(widths) - 1):
            fan_in = widths[i]
            std = gain / np.sqrt(fan_in)
            w = rng.normal(0.0, std, size=(widths[i], widths[i + 1]))
            b = np.zeros(widths[i + 1])
            if i == len(widths) - 2:
                w *= 0.1
                b[:] = np.log(np.expm1(out_level))
            ws.append(w)
            ws.append(b)
        return Mlp(weights=ws, widths=tuple(widths), slope=slope)

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], self.widths, self.slope)

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights)

    def forward_np(self, t) -> np.ndarray:
        """Plain evaluation of xi0(t; theta) without recording."""
        x = np.atleast_1d(np.asarray(t, dtype=float)).reshape(-1, 1)
        n_layers = len(self.weights) // 2
        for i in range(n_layers):
            x = x @ self.weights[2 * i] + self.weights[2 * i + 1]
            if i < n_layers - 1:
                x = np.where(x > 0.0, x, self.slope * x)
        return np.logaddexp(0.0, x[:, 0])

    def forward_taped(self, t: np.ndarray) -> tuple[Tensor, list[Tensor]]:
        """Recorded forward pass; returns xi tensor and parameter leaves."""
        leaves = [_leaf(w) for w in self.weights]
        x = Tensor(np.asarray(t, dtype=float).reshape(-1, 1))
        n_layers = len(self.weights) // 2
        for i in range(n_layers):
            x = t_add_bias(t_matmul(x, leaves[2 * i]), leaves[2 * i + 1])
            if i < n_layers - 1:
                x = t_leaky_relu(x, self.slope)
        flat = Tensor(x.value[:, 0])
        flat.parents = ((x, lambda g: g.reshape(-1, 1)),)
        return t_softplus(flat), leaves


def mlp_forward(mlp: Mlp, t) -> np.ndarray | float:
    """Public curve evaluation; nonnegative by the softplus output."""
    out = mlp.forward_np(t)
    return float(out[0]) if np.isscalar(t) else out


# ---------------------------------------------------------------------------
# neural simulation


@dataclass(frozen=True)
class DriverBatch:
    """Theta-independent noise for one batch of neural simulations."""

    i_path: np.ndarray   # (m, n) Volterra values at t_1..t_n
    dz: np.ndarray       # (m, n) increments of Z = rho W + sqrt(1-rho^2) W_perp


def draw_driver(
    params: RBergomiParams,
    soe: SoeApprox,
    cov: sampler.ThetaCovariance,
    m: int,
    seed: int,
) -> DriverBatch:
    n = params.n_steps
    drv = sampler.volterra_path_msoe(soe, cov, n, seed, count=m)
    perp = sampler.perp_increments(n, seed, m, params.tau)
    dz = params.rho * drv.dw + np.sqrt(1.0 - params.rho**2) * perp
    return DriverBatch(i_path=drv.i_values, dz=dz)


def simulate_neural(
    mlp: Mlp, params: RBergomiParams, noise: DriverBatch
) -> tuple[Tensor, list[Tensor]]:
    """Terminal prices S_T(theta) with every theta-touching op on the tape.

    Identical path arithmetic to the plain simulator: freezing the network
    to a constant reproduces the constant-curve scheme bit for bit.
    """
    n = params.n_steps
    if noise.dz.shape[1] != n:
        raise ValueError("noise batch was drawn for a different step count")
    m = noise.dz.shape[0]
    tau = params.tau
    grid = params.grid
    eta = params.eta
    drift = 0.5 * eta * eta * grid ** (2.0 * params.hurst)
    xi, leaves = mlp.forward_taped(grid[:-1])  # V is needed at t_0..t_{n-1}
    # Wick exponentials of the driver: constants wrt theta
    e_factors = [np.ones(m)]
    for k in range(1, n):
        e_factors.append(np.exp(eta * noise.i_path[:, k - 1] - drift[k]))
    s = Tensor(np.full(m, params.s0))
    for i in range(n):
        v = t_mul_const(t_take(xi, i), e_factors[i])
        growth = t_sub(t_mul_const(t_sqrt(v), noise.dz[:, i]), t_mul_const(v, 0.5 * tau))
        s = t_mul(s, t_exp(growth))
        if not np.all(np.isfinite(s.value)):
            raise TrainingDivergence(f"overflow in price step {i + 1}")
    return s, leaves


def w1_loss_and_grad(
    s_t: Tensor, leaves: list[Tensor], data: np.ndarray
) -> tuple[float, list[np.ndarray]]:
    loss = t_w1(s_t, data)
    grads = backward(loss, leaves)
    return float(loss.value), grads


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @staticmethod
    def for_params(params: list[np.ndarray], lr: float = 1e-4) -> "AdamState":
        return AdamState(
            lr=lr,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
    """One in-place Adam update with bias correction."""
    if len(params) != len(state.m) or len(params) != len(grads):
        raise ValueError("parameter/state shape mismatch")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps_adam)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    batch_size: int = 4096
    epochs: int = 100
    max_iters: int | None = None
    lr: float = 1e-4
    lr_decay: float = 0.5
    lr_patience: int = 5
    lr_floor: float = 1e-6
    train_fraction: float = 0.8192
    seed: int = 0
    eval_strikes: tuple[float, ...] = (-0.2, -0.1, 0.0, 0.1, 0.2)

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train fraction must lie in (0, 1)")


@dataclass
class TrainResult:
    mlp: Mlp                 # best-so-far parameters (by test W1)
    final_mlp: Mlp           # last-iterate parameters
    history: list[dict]
    best_test_w1: float
    adam: AdamState
    iterations: int


def _epoch_eval(mlp, params, soe, cov, test_set, strikes, seed):
    noise = draw_driver(params, soe, cov, test_set.size, seed)
    s_t, _ = simulate_neural(mlp, params, noise)
    gen = s_t.value
    w1 = wasserstein_p(gen, test_set, 1.0)
    max_err = 0.0
    for k in strikes:
        strike = params.s0 * np.exp(k)
        p_gen, _ = price_european(gen, ("call", strike), params.rate, params.t_horizon)
        p_dat, _ = price_european(test_set, ("call", strike), params.rate, params.t_horizon)
        max_err = max(max_err, abs(p_gen - p_dat))
    return w1, max_err, gen


def train(
    config: TrainConfig,
    dataset: np.ndarray,
    params: RBergomiParams,
    soe: SoeApprox,
    cov: sampler.ThetaCovariance | None = None,
    mlp: Mlp | None = None,
) -> TrainResult:
    """Wasserstein-1 training of the forward variance curve.

    Each iteration draws fresh driver noise for the generated batch and a
    data batch from a shuffled epoch partition (without replacement).
    Per epoch the test-set W1 and the max option-price error over the
    evaluation strikes are logged; the best-so-far test W1 decides the
    returned checkpoint, and the learning rate halves after `lr_patience`
    epochs without improvement.
    """
    dataset = np.asarray(dataset, dtype=float).ravel()
    n_train = int(np.floor(dataset.size * config.train_fraction))
    train_set = dataset[:n_train]
    test_set = dataset[n_train:]
    if config.batch_size > n_train or test_set.size < 2:
        raise ValueError("dataset too small for this batch size / split")
    if cov is None:
        cov = sampler.build_covariance(soe, params.hurst, params.tau)
    if mlp is None:
        mlp = Mlp.initialize(config.seed)
    adam = AdamState.for_params(mlp.weights, lr=config.lr)
    history: list[dict] = []
    best_w1 = np.inf
    best_weights = mlp.copy()
    stall = 0
    iteration = 0
    batches_per_epoch = n_train // config.batch_size
    done = False
    for epoch in range(config.epochs):
        order = np.random.Generator(
            np.random.Philox(np.random.SeedSequence((config.seed, 11, epoch)))
        ).permutation(n_train)
        for b in range(batches_per_epoch):
            iteration += 1
            batch = train_set[order[b * config.batch_size : (b + 1) * config.batch_size]]
            noise = draw_driver(
                params, soe, cov, config.batch_size, seed=_it_seed(config.seed, iteration)
            )
            s_t, leaves = simulate_neural(mlp, params, noise)
            loss, grads = w1_loss_and_grad(s_t, leaves, batch)
            if not np.isfinite(loss):
                raise TrainingDivergence(f"loss diverged at iteration {iteration}")
            adam_step(adam, mlp.weights, grads)
            history.append(
                {"iter": iteration, "epoch": epoch, "train_w1": loss,
                 "test_w1": np.nan, "max_price_err": np.nan}
            )
            if config.max_iters is not None and iteration >= config.max_iters:
                done = True
                break
        test_w1, max_err, _ = _epoch_eval(
            mlp, params, soe, cov, test_set, config.eval_strikes,
            seed=_it_seed(config.seed, 0),
        )
        history.append(
            {"iter": iteration, "epoch": epoch, "train_w1": np.nan,
             "test_w1": test_w1, "max_price_err": max_err}
        )
        if test_w1 < best_w1:
            best_w1 = test_w1
            best_weights = mlp.copy()
            stall = 0
        else:
            stall += 1
            if stall >= config.lr_patience:
                adam.lr = max(adam.lr * config.lr_decay, config.lr_floor)
                stall = 0
        if done:
            break
    return TrainResult(
        mlp=best_weights, final_mlp=mlp, history=history,
        best_test_w1=float(best_w1), adam=adam, iterations=iteration,
    )


def _it_seed(seed: int, iteration: int) -> int:
    return (int(seed) * 1_000_003 + iteration) % (2**63)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    mlp: Mlp,
    params: RBergomiParams,
    soe: SoeApprox,
    data: np.ndarray,
    trials: int = 50,
    fd_step: float = 1e-4,
    seed: int = 0,
    cov: sampler.ThetaCovariance | None = None,
) -> dict:
    """Central finite differences through simulation + W1 loss.

    Perturbs `trials` randomly selected parameters and reports the worst
    relative error of the tape gradient.
    """
    if cov is None:
        cov = sampler.build_covariance(soe, params.hurst, params.tau)
    noise = draw_driver(params, soe, cov, np.asarray(data).size, seed)

    def loss_value() -> float:
        s_t, _ = simulate_neural(mlp, params, noise)
        return float(t_w1(s_t, data).value)

    s_t, leaves = simulate_neural(mlp, params, noise)
    _, grads = w1_loss_and_grad(s_t, leaves, data)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, 13))))
    sizes = [w.size for w in mlp.weights]
    total = sum(sizes)
    picks = rng.choice(total, size=min(trials, total), replace=False)
    worst = 0.0
    details = []
    for flat_idx in picks:
        a_idx = 0
        rem = int(flat_idx)
        while rem >= sizes[a_idx]:
            rem -= sizes[a_idx]
            a_idx += 1
        w = mlp.weights[a_idx]
        pos = np.unravel_index(rem, w.shape)
        orig = w[pos]
        w[pos] = orig + fd_step
        up = loss_value()
        w[pos] = orig - fd_step
        dn = loss_value()
        w[pos] = orig
        fd = (up - dn) / (2.0 * fd_step)
        an = float(grads[a_idx][pos])
        denom = max(abs(fd), abs(an), 1e-12)
        rel = abs(fd - an) / denom
        worst = max(worst, rel)
        details.append({"param": a_idx, "index": pos, "fd": fd, "tape": an, "rel_err": rel})
    return {"max_rel_err": worst, "n_checked": len(picks), "details": details}


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(path, mlp: Mlp, adam: AdamState | None = None, iteration: int = 0) -> None:
    """Plain-text dump: shapes then rows of parameters and Adam moments."""
    with open(path, "w") as fh:
        fh.write("roughvol-mlp-checkpoint v1\n")
        fh.write("widths " + " ".join(str(w) for w in mlp.widths) + "\n")
        fh.write(f"slope {mlp.slope:.17g}\n")
        fh.write(f"iteration {iteration}\n")
        if adam is None:
            fh.write("adam none\n")
        else:
            fh.write(
                f"adam {adam.lr:.17g} {adam.beta1:.17g} {adam.beta2:.17g} "
                f"{adam.eps_adam:.17g} {adam.step_count}\n"
            )
        arrays = list(mlp.weights)
        names = [f"param{i}" for i in range(len(mlp.weights))]
        if adam is not None:
            arrays += adam.m + adam.v
            names += [f"adam_m{i}" for i in range(len(adam.m))]
            names += [f"adam_v{i}" for i in range(len(adam.v))]
        for name, arr in zip(names, arrays):
            fh.write(f"array {name} " + " ".join(str(d) for d in arr.shape) + "\n")
            flat = arr.ravel()
            fh.write(" ".join(f"{x:.17g}" for x in flat) + "\n")


def load_checkpoint(path) -> tuple[Mlp, AdamState | None, int]:
    with open(path) as fh:
        magic = fh.readline().strip()
        if magic != "roughvol-mlp-checkpoint v1":
            raise ValueError(f"{path}: not a checkpoint file")
        widths = tuple(int(x) for x in fh.readline().split()[1:])
        slope = float(fh.readline().split()[1])
        iteration = int(fh.readline().split()[1])
        adam_line = fh.readline().split()
        arrays: dict[str, np.ndarray] = {}
        while True:
            header = fh.readline()
            if not header:
                break
            _, name, *shape = header.split()
            shape = tuple(int(s) for s in shape)
            data = np.array(fh.readline().split(), dtype=float)
            arrays[name] = data.reshape(shape) if shape else data[0]
    n_layers = len(widths) - 1
    weights = [arrays[f"param{i}"] for i in range(2 * n_layers)]
    mlp = Mlp(weights=weights, widths=widths, slope=slope)
    adam = None
    if adam_line[1] != "none":
        adam = AdamState(
            lr=float(adam_line[1]), beta1=float(adam_line[2]), beta2=float(adam_line[3]),
            eps_adam=float(adam_line[4]), step_count=int(adam_line[5]),
            m=[arrays[f"adam_m{i}"] for i in range(2 * n_layers)],
            v=[arrays[f"adam_v{i}"] for i in range(2 * n_layers)],
        )
    return mlp, adam, iteration


def write_history_csv(history: list[dict], path) -> None:
    with open(path, "w") as fh:
        fh.write("iter,epoch,train_w1,test_w1,max_price_err\n")
        for row in history:
            def fmt(v):
                return "" if isinstance(v, float) and np.isnan(v) else f"{v:.17g}"
            fh.write(
                f"{row['iter']},{row['epoch']},{fmt(row['train_w1'])},"
                f"{fmt(row['test_w1'])},{fmt(row['max_price_err'])}\n"
            )

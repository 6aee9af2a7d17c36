"""Command-line pipeline: kernel fitting, simulation, pricing, training.

All commands consume a flat key=value config file, write their outputs as
CSV into `out_dir` together with a resolved copy of the configuration,
and are deterministic given (config, seed) for any --threads value.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import shutil
import sys
from pathlib import Path

import numpy as np

from . import neural, pricing, sampler
from .kernel import (
    KernelConstructionError,
    SoeApprox,
    build_soe_approach_a,
    build_soe_approach_b,
    l2_error,
    soe_from_csv,
    soe_to_csv,
)
from .model import (
    ForwardVarianceCurve,
    RBergomiParams,
    SimulationError,
    make_curve_abs_bm,
    make_curve_abs_fbm,
    make_curve_constant,
    simulate_paths,
)
from .pricing import InversionError
from .sampler import CovarianceError


class ConfigError(ValueError):
    pass


# every key the flat config may carry, with its parser
MODEL_KEYS = {
    "s0": float,
    "eta": float,
    "h": float,
    "rho": float,
    "t_horizon": float,
    "n_steps": int,
    "m_paths": int,
    "seed": int,
    "scheme": str,
    "soe_file": str,
    "curve_kind": str,
    "curve_scale": float,
    "curve_seed": int,
    "curve_h": float,
}
COMMAND_KEYS = {
    "kernel-fit": {"eps": float, "n_soe": int, "approach": str, "n_list": str, "out_dir": str},
    "smile": {"schemes": str, "strikes": str, "eps": float, "out_dir": str},
    "moments": {"n_list": str, "eps": float, "out_dir": str},
    "gen-data": {"eps": float, "n_soe": int, "out_dir": str},
    "train": {
        "eps": float, "n_soe": int, "data_dir": str, "batch_size": int, "epochs": int,
        "max_iters": int, "lr": float, "train_fraction": float, "out_dir": str,
    },
    "evaluate": {
        "eps": float, "n_soe": int, "data_dir": str, "train_dir": str,
        "strikes": str, "out_dir": str,
    },
}

DEFAULTS = {
    "s0": 1.0, "eta": 1.9, "h": 0.07, "rho": -0.9, "t_horizon": 1.0,
    "n_steps": 500, "m_paths": 100_000, "seed": 0, "scheme": "msoe",
    "curve_kind": "constant", "curve_scale": 0.235**2, "curve_seed": 1,
    "curve_h": 0.07, "eps": 8e-4, "strikes": "-0.4:0.4:41",
    "batch_size": 4096, "epochs": 100, "lr": 1e-4, "train_fraction": 0.8192,
}


def load_config(path: str, command: str) -> dict:
    allowed = dict(MODEL_KEYS)
    allowed.update(COMMAND_KEYS[command])
    values: dict = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in allowed:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = allowed[key](val)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {val!r}") from exc
    for key, default in DEFAULTS.items():
        if key in allowed:
            values.setdefault(key, default)
    return values


def _prepare_out_dir(cfg: dict, force: bool) -> Path:
    if "out_dir" not in cfg:
        raise ConfigError("missing required key 'out_dir'")
    out = Path(cfg["out_dir"])
    if out.exists() and any(out.iterdir()) and not force:
        raise OSError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(cfg: dict, out: Path) -> None:
    with open(out / "config_resolved.txt", "w") as fh:
        for key in sorted(cfg):
            fh.write(f"{key} = {cfg[key]}\n")


def _params(cfg: dict) -> RBergomiParams:
    return RBergomiParams(
        s0=cfg["s0"], eta=cfg["eta"], hurst=cfg["h"], rho=cfg["rho"],
        t_horizon=cfg["t_horizon"], n_steps=cfg["n_steps"],
    )


def _curve(cfg: dict, params: RBergomiParams) -> ForwardVarianceCurve:
    kind = cfg["curve_kind"]
    if kind == "constant":
        return make_curve_constant(cfg["curve_scale"])
    if kind == "abs_bm":
        return make_curve_abs_bm(cfg["curve_scale"], params.grid, cfg["curve_seed"])
    if kind == "abs_fbm":
        return make_curve_abs_fbm(
            cfg["curve_scale"], cfg["curve_h"], params.grid, cfg["curve_seed"]
        )
    raise ConfigError(f"unknown curve_kind {kind!r}")


def _soe_for(cfg: dict, params: RBergomiParams, n_terms: int | None = None) -> SoeApprox:
    if n_terms is not None:
        return build_soe_approach_b(
            params.hurst, t1=params.tau, horizon=params.t_horizon, n_terms=n_terms
        )
    if cfg.get("soe_file"):
        return soe_from_csv(cfg["soe_file"])
    if cfg.get("n_soe"):
        return build_soe_approach_b(
            params.hurst, t1=params.tau, horizon=params.t_horizon, n_terms=cfg["n_soe"]
        )
    return build_soe_approach_b(
        params.hurst, eps=cfg["eps"], t1=params.tau, horizon=params.t_horizon
    )


def _parse_strikes(spec: str) -> tuple[float, float, int]:
    try:
        lo, hi, count = spec.split(":")
        return float(lo), float(hi), int(count)
    except ValueError as exc:
        raise ConfigError(f"bad strikes spec {spec!r}, expected kmin:kmax:count") from exc


def _parse_int_list(spec: str) -> list[int]:
    try:
        return [int(x) for x in spec.replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError(f"bad integer list {spec!r}") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_kernel_fit(cfg: dict, out: Path, threads: int) -> None:
    params_h = cfg["h"]
    tau = cfg["t_horizon"] / cfg["n_steps"]
    horizon = cfg["t_horizon"]
    approach = cfg.get("approach", "both").lower()
    if approach not in ("a", "b", "both"):
        raise ConfigError(f"approach must be a, b or both, got {approach!r}")
    if cfg.get("n_soe"):
        soe = build_soe_approach_b(params_h, t1=tau, horizon=horizon, n_terms=cfg["n_soe"])
    else:
        soe = build_soe_approach_b(params_h, eps=cfg["eps"], t1=tau, horizon=horizon)
    soe_to_csv(soe, out / "soe.csv")
    rows = []
    n_list = _parse_int_list(cfg.get("n_list", "4,8,16"))
    for n in n_list:
        if approach in ("a", "both"):
            sa = build_soe_approach_a(params_h, n, t1=tau, horizon=horizon)
            rows.append(("a", n, l2_error(sa, tau, horizon)))
        if approach in ("b", "both"):
            sb = build_soe_approach_b(params_h, t1=tau, horizon=horizon, n_terms=n)
            rows.append(("b", n, l2_error(sb, tau, horizon)))
    with open(out / "kernel_err.csv", "w") as fh:
        fh.write("approach,N,err\n")
        for name, n, err in rows:
            fh.write(f"{name},{n},{err:.17g}\n")


def _scheme_terminal(cfg, params, curve, scheme_name, threads):
    if scheme_name == "exact":
        batch = simulate_paths(
            params, curve, "exact", cfg["m_paths"], cfg["seed"], threads=threads
        )
    elif scheme_name.startswith("msoe"):
        n_terms = int(scheme_name.split("-", 1)[1]) if "-" in scheme_name else None
        soe = _soe_for(cfg, params, n_terms=n_terms)
        batch = simulate_paths(
            params, curve, "msoe", cfg["m_paths"], cfg["seed"], soe=soe, threads=threads
        )
    else:
        raise ConfigError(f"unknown scheme {scheme_name!r}")
    return batch.terminal


def cmd_smile(cfg: dict, out: Path, threads: int) -> None:
    params = _params(cfg)
    curve = _curve(cfg, params)
    k_lo, k_hi, n_k = _parse_strikes(cfg["strikes"])
    schemes = [s.strip() for s in cfg.get("schemes", "exact,msoe").split(",") if s.strip()]
    smiles: dict[str, list[pricing.SmilePoint]] = {}
    failures: list[str] = []
    for name in schemes:
        try:
            terminal = _scheme_terminal(cfg, params, curve, name, threads)
            pts = pricing.smile_from_terminal(
                terminal, params.s0, params.t_horizon, params.rate,
                k_min=k_lo, k_max=k_hi, n_strikes=n_k,
            )
            smiles[name] = pts
            pricing.write_smile_csv(pts, out / f"smile_{name}.csv")
        except (CovarianceError, KernelConstructionError, SimulationError,
                InversionError, ValueError) as exc:
            failures.append(f"{name}: {exc}")
    if "exact" in smiles:
        others = [n for n in smiles if n != "exact"]
        with open(out / "smile_diff.csv", "w") as fh:
            fh.write("k,sigma_exact," + ",".join(f"dsigma_{n}" for n in others) + "\n")
            for i, pt in enumerate(smiles["exact"]):
                diffs = [
                    f"{abs(smiles[n][i].implied_vol - pt.implied_vol):.17g}" for n in others
                ]
                fh.write(f"{pt.k:.17g},{pt.implied_vol:.17g}," + ",".join(diffs) + "\n")
    if failures:
        (out / "failures.txt").write_text("\n".join(failures) + "\n")
        raise SimulationError("; ".join(failures))


def cmd_moments(cfg: dict, out: Path, threads: int) -> None:
    params = _params(cfg)
    rows = []
    for n_terms in _parse_int_list(cfg.get("n_list", "2,4,8,16,20")):
        soe = _soe_for(cfg, params, n_terms=n_terms)
        stats = pricing.accumulate_moment_stats(
            "msoe", params.n_steps, cfg["m_paths"], cfg["seed"],
            params.hurst, params.tau, soe=soe, threads=threads,
        )
        r1, r2 = pricing.moment_rmse(stats, params.eta, params.hurst)
        rows.append({"scheme": "msoe", "N": soe.n_terms, "M": cfg["m_paths"],
                     "rmse1": r1, "rmse2": r2})
    pricing.write_moments_csv(rows, out / "moments.csv")


def _manifest_keys(cfg: dict) -> dict:
    keys = ("s0", "eta", "h", "rho", "t_horizon", "n_steps", "m_paths", "seed",
            "scheme", "curve_kind", "curve_scale", "curve_seed", "curve_h")
    return {k: cfg[k] for k in keys if k in cfg}


def cmd_gen_data(cfg: dict, out: Path, threads: int) -> None:
    params = _params(cfg)
    curve = _curve(cfg, params)
    scheme = cfg["scheme"]
    soe = _soe_for(cfg, params) if scheme == "msoe" else None
    batch = simulate_paths(
        params, curve, scheme, cfg["m_paths"], cfg["seed"], soe=soe, threads=threads
    )
    with open(out / "dataset.csv", "w") as fh:
        fh.write("sample_id,s_t\n")
        for i, val in enumerate(batch.terminal):
            fh.write(f"{i},{val:.17g}\n")
    with open(out / "manifest.txt", "w") as fh:
        for key, val in sorted(_manifest_keys(cfg).items()):
            fh.write(f"{key} = {val}\n")


def _load_dataset(data_dir: str, cfg: dict) -> np.ndarray:
    root = Path(data_dir)
    manifest_path = root / "manifest.txt"
    data_path = root / "dataset.csv"
    if not manifest_path.exists() or not data_path.exists():
        raise ConfigError(f"{data_dir} does not contain dataset.csv + manifest.txt")
    manifest = {}
    for line in manifest_path.read_text().splitlines():
        if line.strip():
            key, _, val = line.partition("=")
            manifest[key.strip()] = val.strip()
    for key, val in _manifest_keys(cfg).items():
        if key in ("m_paths", "seed"):
            continue  # dataset size / generation seed need not match training
        if key in manifest and manifest[key] != str(val):
            raise ConfigError(
                f"dataset manifest mismatch for {key!r}: dataset has "
                f"{manifest[key]}, config has {val}"
            )
    data = np.loadtxt(data_path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 1]


def cmd_train(cfg: dict, out: Path, threads: int) -> None:
    if "data_dir" not in cfg:
        raise ConfigError("missing required key 'data_dir'")
    params = _params(cfg)
    dataset = _load_dataset(cfg["data_dir"], cfg)
    soe = _soe_for(cfg, params)
    tc = neural.TrainConfig(
        batch_size=cfg["batch_size"], epochs=cfg["epochs"],
        max_iters=cfg.get("max_iters"), lr=cfg["lr"],
        train_fraction=cfg["train_fraction"], seed=cfg["seed"],
    )
    result = neural.train(tc, dataset, params, soe)
    neural.save_checkpoint(out / "checkpoint.txt", result.mlp,
                           iteration=result.iterations)
    neural.save_checkpoint(out / "checkpoint_last.txt", result.final_mlp,
                           adam=result.adam, iteration=result.iterations)
    neural.write_history_csv(result.history, out / "loss_history.csv")
    print(f"trained {result.iterations} iterations; best test W1 = {result.best_test_w1:.6g}")


def cmd_evaluate(cfg: dict, out: Path, threads: int) -> None:
    for key in ("data_dir", "train_dir"):
        if key not in cfg:
            raise ConfigError(f"missing required key {key!r}")
    params = _params(cfg)
    dataset = _load_dataset(cfg["data_dir"], cfg)
    trained_mlp, _, _ = neural.load_checkpoint(Path(cfg["train_dir"]) / "checkpoint.txt")
    fresh_mlp = neural.Mlp.initialize(cfg["seed"])
    soe = _soe_for(cfg, params)
    cov = sampler.build_covariance(soe, params.hurst, params.tau)
    frac = cfg.get("train_fraction", DEFAULTS["train_fraction"])
    test_set = dataset[int(np.floor(dataset.size * frac)):]
    noise = neural.draw_driver(params, soe, cov, test_set.size, neural._it_seed(cfg["seed"], 0))
    results = {}
    for tag, net in (("before", fresh_mlp), ("after", trained_mlp)):
        s_t, _ = neural.simulate_neural(net, params, noise)
        results[tag] = s_t.value
    k_lo, k_hi, n_k = _parse_strikes(cfg.get("strikes", DEFAULTS["strikes"]))
    strikes = params.s0 * np.exp(np.linspace(k_lo, k_hi, n_k))
    with open(out / "price_vs_strike.csv", "w") as fh:
        fh.write("k,K,price_data,price_before,price_after\n")
        for k, strike in zip(np.linspace(k_lo, k_hi, n_k), strikes):
            p_d, _ = pricing.price_european(test_set, ("call", strike), params.rate, params.t_horizon)
            p_b, _ = pricing.price_european(results["before"], ("call", strike), params.rate, params.t_horizon)
            p_a, _ = pricing.price_european(results["after"], ("call", strike), params.rate, params.t_horizon)
            fh.write(f"{k:.17g},{strike:.17g},{p_d:.17g},{p_b:.17g},{p_a:.17g}\n")
    qs = (np.arange(test_set.size) + 0.5) / test_set.size
    with open(out / "cdf.csv", "w") as fh:
        fh.write("q,s_t_data,s_t_before,s_t_after\n")
        for q, d, b, a in zip(qs, np.sort(test_set), np.sort(results["before"]),
                              np.sort(results["after"])):
            fh.write(f"{q:.17g},{d:.17g},{b:.17g},{a:.17g}\n")
    history_src = Path(cfg["train_dir"]) / "loss_history.csv"
    if history_src.exists():
        shutil.copyfile(history_src, out / "learning_curve.csv")
    from .metrics import wasserstein_p

    w1_before = wasserstein_p(results["before"], test_set, 1.0)
    w1_after = wasserstein_p(results["after"], test_set, 1.0)
    with open(out / "eval_summary.csv", "w") as fh:
        fh.write("metric,value\n")
        fh.write(f"w1_before,{w1_before:.17g}\n")
        fh.write(f"w1_after,{w1_after:.17g}\n")
    print(f"W1 before training: {w1_before:.6g}; after: {w1_after:.6g}")


COMMANDS = {
    "kernel-fit": cmd_kernel_fit,
    "smile": cmd_smile,
    "moments": cmd_moments,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rough-vol-kit",
        description="rough Bergomi simulation, pricing, and forward-variance learning",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True)
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--threads", type=int, default=1, help="cap on worker threads")
    parser.add_argument("--force", action="store_true",
                        help="allow writing into a non-empty out_dir")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.command)
        if args.seed is not None:
            cfg["seed"] = args.seed
        out = _prepare_out_dir(cfg, args.force)
        _write_resolved(cfg, out)
        COMMANDS[args.command](cfg, out, max(1, args.threads))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (KernelConstructionError, CovarianceError, SimulationError,
            InversionError, neural.TrainingDivergence) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())

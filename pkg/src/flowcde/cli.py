"""Command-line entry point: synthesis, surrogate pretraining, training,
evaluation, prediction, and causal reporting.

Every run resolves its flags (built-in defaults, then an optional
``--config config_resolved.json``, then explicit flags) and writes the
result back to ``<out>/config_resolved.json`` so it can be replayed.
No subcommand writes outside its ``--out`` directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .causal import (CausalEffectReport, CausalEstimator, PerturbationStrategy,
                     SurrogatePredictor, pretrain_surrogate, report_csv,
                     report_summary)
from .data import SynthConfig, load, normalize, save_dataset, synth_generate, window
from .dynamics import EncoderConfig, encode, init_encoder_params
from .metrics import format_table, report_to_dict
from .model import LossConfig
from .optim import load_checkpoint, save_checkpoint
from .solvers import SolverConfig
from .spline import fit_natural_cubic
from .tensor import no_grad
from .training import (SEED_INIT, SEED_PERTURB, TrainConfig, evaluate,
                       params_from_arrays, sub_seed, train)

__all__ = ["main"]


# -- parser -------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--out", required=True, help="output directory for this run")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None,
                   help="config_resolved.json from a previous run; explicit flags win")


def _add_encoder(p: argparse.ArgumentParser):
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--flow-window", type=int, default=14)
    p.add_argument("--poi-window", type=int, default=4)
    p.add_argument("--obs-points", type=int, default=8)
    p.add_argument("--solver", choices=("euler", "rk4", "adaptive_rk4"), default="rk4")
    p.add_argument("--step", type=float, default=1.2)
    p.add_argument("--rtol", type=float, default=1e-3)
    p.add_argument("--atol", type=float, default=1e-5)
    p.add_argument("--gradient-mode", choices=("backprop_through_solver", "adjoint"),
                   default="backprop_through_solver")
    p.add_argument("--rescale-correction", action="store_true",
                   help="multiply correction weights by K so they average to one")


def _add_surrogate(p: argparse.ArgumentParser):
    p.add_argument("--surrogate-width", type=int, default=None,
                   help="surrogate MLP width (default: hidden size)")
    p.add_argument("--surrogate-epochs", type=int, default=30)


def _add_training(p: argparse.ArgumentParser):
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--horizon", type=int, default=14)
    p.add_argument("--delta", type=float, default=1.0, help="huber transition point")
    p.add_argument("--pool", choices=("mean", "weighted"), default="mean")
    p.add_argument("--strategy", choices=("zero", "random", "mean"), default="zero")
    p.add_argument("--random-scale", type=float, default=1.0)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="flowcde",
        description="dual-path continuous-time crowd-flow forecasting",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    submap = {}

    p = sub.add_parser("synth", help="generate a planted-causality dataset")
    _add_common(p)
    p.add_argument("--nodes", type=int, default=20)
    p.add_argument("--channels", type=int, default=2)
    p.add_argument("--categories", type=int, default=4)
    p.add_argument("--days", type=int, default=720)
    p.add_argument("--days-per-month", type=int, default=30)
    p.add_argument("--planted-category", type=int, default=1)
    p.add_argument("--planted-strength", type=float, default=2.0)
    p.add_argument("--noise-std", type=float, default=0.1)
    p.add_argument("--ar-coefficient", type=float, default=0.5)
    p.add_argument("--category-correlation", type=float, default=0.0)
    p.set_defaults(func=_cmd_synth)
    submap["synth"] = p

    p = sub.add_parser("pretrain-surrogate",
                       help="fit and freeze the counterfactual surrogate")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset manifest.json")
    _add_encoder(p)
    _add_surrogate(p)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--batch", type=int, default=64)
    p.set_defaults(func=_cmd_pretrain)
    submap["pretrain-surrogate"] = p

    p = sub.add_parser("train", help="train the forecaster")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=("full", "no-causal"), default="full")
    p.add_argument("--surrogate", default=None,
                   help="surrogate checkpoint; omitted -> pretrain inline")
    _add_encoder(p)
    _add_surrogate(p)
    _add_training(p)
    p.set_defaults(func=_cmd_train)
    submap["train"] = p

    for name, func in (("evaluate", _cmd_evaluate), ("predict", _cmd_predict)):
        p = sub.add_parser(name, help=f"{name} a trained checkpoint on one split")
        _add_common(p)
        p.add_argument("--data", required=True)
        p.add_argument("--model", required=True, help="model checkpoint path (no suffix)")
        p.add_argument("--surrogate", default=None)
        p.add_argument("--split", choices=("train", "val", "test"), default="test")
        if name == "predict":
            p.add_argument("--anchor", type=int, default=None,
                           help="forecast only the window anchored at this day")
        p.set_defaults(func=func)
        submap[name] = p

    p = sub.add_parser("causal-report",
                       help="per-node causal effects and weights for one window")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--surrogate", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--anchor", type=int, default=None,
                   help="anchor day (default: last window of the split)")
    p.set_defaults(func=_cmd_causal_report)
    submap["causal-report"] = p

    return parser, submap


# -- shared plumbing ----------------------------------------------------------

def _resolved_dict(args) -> dict:
    skip = {"config", "func"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _write_resolved(args, out: Path):
    text = json.dumps(_resolved_dict(args), indent=2, sort_keys=True)
    (out / "config_resolved.json").write_text(text + "\n")


def _enc_config_from_args(args, bundle) -> EncoderConfig:
    return EncoderConfig(
        num_nodes=bundle.num_nodes,
        num_channels=bundle.num_channels,
        num_categories=bundle.num_categories,
        hidden=args.hidden,
        flow_window=args.flow_window,
        poi_window=args.poi_window,
        num_obs_points=args.obs_points,
        solver=SolverConfig(method=args.solver, step_size=args.step,
                            rtol=args.rtol, atol=args.atol,
                            gradient_mode=args.gradient_mode),
        rescale_correction=args.rescale_correction,
    )


def _enc_config_from_hyper(hyper: dict, bundle) -> EncoderConfig:
    return EncoderConfig(
        num_nodes=bundle.num_nodes,
        num_channels=bundle.num_channels,
        num_categories=bundle.num_categories,
        hidden=hyper["hidden"],
        flow_window=hyper["flow_window"],
        poi_window=hyper["poi_window"],
        num_obs_points=hyper["obs_points"],
        solver=SolverConfig(method=hyper["solver"], step_size=hyper["step"],
                            rtol=hyper["rtol"], atol=hyper["atol"],
                            gradient_mode=hyper["gradient_mode"]),
        rescale_correction=hyper["rescale_correction"],
    )


def _save_surrogate(path, surrogate: SurrogatePredictor):
    params = {name: t.data for name, t in surrogate.params.items()}
    params["adjacency_norm"] = surrogate.adjacency_norm
    save_checkpoint(path, params, hyperparameters={
        "kind": "surrogate",
        "hidden": surrogate.hidden,
        "num_categories": surrogate.num_categories,
        "width": surrogate.width,
        "state_hash": surrogate.state_hash(),
    })


def _load_surrogate(path) -> SurrogatePredictor:
    arrays, hyper = load_checkpoint(path)
    if hyper.get("kind") != "surrogate":
        raise ValueError(f"'{path}' is not a surrogate checkpoint")
    adjacency = arrays.pop("adjacency_norm")
    surrogate = SurrogatePredictor(adjacency, hyper["hidden"],
                                   hyper["num_categories"], hyper["width"],
                                   params=arrays)
    surrogate.freeze()
    if surrogate.state_hash() != hyper["state_hash"]:
        raise ValueError(f"surrogate checkpoint '{path}' failed its integrity hash")
    return surrogate


def _pretrain(args, bundle, enc_config) -> SurrogatePredictor:
    enc_params = init_encoder_params(
        np.random.default_rng(np.random.SeedSequence([args.seed, SEED_INIT])),
        enc_config)
    return pretrain_surrogate(
        bundle, enc_params, enc_config,
        width=args.surrogate_width, epochs=args.surrogate_epochs,
        lr=args.lr, weight_decay=args.weight_decay, batch_size=args.batch,
        seed=args.seed)


def _estimator_from_hyper(hyper: dict, surrogate_path) -> CausalEstimator | None:
    if hyper["variant"] != "full":
        return None
    if surrogate_path is None:
        raise ValueError("this checkpoint was trained with the causal estimator; "
                         "pass --surrogate")
    strategy = PerturbationStrategy(
        kind=hyper["strategy"], random_scale=hyper["random_scale"],
        seed=sub_seed(hyper["seed"], SEED_PERTURB))
    return CausalEstimator(surrogate=_load_surrogate(surrogate_path),
                           strategy=strategy)


def _load_model(args, bundle):
    arrays, hyper = load_checkpoint(args.model)
    if hyper.get("kind") != "model":
        raise ValueError(f"'{args.model}' is not a model checkpoint")
    enc_config = _enc_config_from_hyper(hyper, bundle)
    params = params_from_arrays(arrays, enc_config, hyper["horizon"])
    estimator = _estimator_from_hyper(hyper, args.surrogate)
    return params, hyper, enc_config, estimator


# -- subcommands --------------------------------------------------------------

def _cmd_synth(args, out: Path) -> int:
    cfg = SynthConfig(
        num_nodes=args.nodes, num_channels=args.channels,
        num_categories=args.categories, days=args.days,
        days_per_month=args.days_per_month,
        planted_category=args.planted_category,
        planted_strength=args.planted_strength, noise_std=args.noise_std,
        ar_coefficient=args.ar_coefficient,
        category_correlation=args.category_correlation, seed=args.seed)
    bundle = synth_generate(cfg)
    manifest = save_dataset(bundle, out)
    print(f"wrote dataset '{bundle.name}' "
          f"({bundle.flow.shape[0]} days, {bundle.num_nodes} nodes) to {manifest}")
    return 0


def _cmd_pretrain(args, out: Path) -> int:
    bundle = load(args.data)
    enc_config = _enc_config_from_args(args, bundle)
    surrogate = _pretrain(args, bundle, enc_config)
    _save_surrogate(out / "surrogate", surrogate)
    print(f"wrote frozen surrogate (hash {surrogate.state_hash()[:12]}) "
          f"to {out / 'surrogate'}.json/.bin")
    return 0


def _cmd_train(args, out: Path) -> int:
    bundle = load(args.data)
    enc_config = _enc_config_from_args(args, bundle)

    estimator = None
    if args.variant == "full":
        if args.surrogate is not None:
            surrogate = _load_surrogate(args.surrogate)
        else:
            surrogate = _pretrain(args, bundle, enc_config)
            _save_surrogate(out / "surrogate", surrogate)
        strategy = PerturbationStrategy(
            kind=args.strategy, random_scale=args.random_scale,
            seed=sub_seed(args.seed, SEED_PERTURB))
        estimator = CausalEstimator(surrogate=surrogate, strategy=strategy)

    train_config = TrainConfig(
        learning_rate=args.lr, weight_decay=args.weight_decay,
        batch_size=args.batch, max_epochs=args.epochs, patience=args.patience,
        horizon=args.horizon, pool=args.pool,
        loss=LossConfig(delta=args.delta), seed=args.seed)

    log_lines = []

    def log(line: str):
        log_lines.append(line)
        print(line)

    log(f"training variant={args.variant} lr={args.lr} batch={args.batch} "
        f"hidden={args.hidden} flow_window={args.flow_window} "
        f"poi_window={args.poi_window} horizon={args.horizon} "
        f"obs_points={args.obs_points} strategy={args.strategy} seed={args.seed}")
    result = train(bundle, enc_config, train_config, estimator=estimator, log=log)
    log(f"best epoch {result.best_epoch} val_mae {result.best_val_mae:.6f} "
        f"({result.epochs_run} epochs run)")

    hyper = {
        "kind": "model",
        "variant": args.variant,
        "strategy": args.strategy,
        "random_scale": args.random_scale,
        "horizon": args.horizon,
        "pool": args.pool,
        "huber_delta": args.delta,
        "seed": args.seed,
        "hidden": args.hidden,
        "flow_window": args.flow_window,
        "poi_window": args.poi_window,
        "obs_points": args.obs_points,
        "solver": args.solver,
        "step": args.step,
        "rtol": args.rtol,
        "atol": args.atol,
        "gradient_mode": args.gradient_mode,
        "rescale_correction": args.rescale_correction,
        "best_epoch": result.best_epoch,
        "best_val_mae": result.best_val_mae,
    }
    save_checkpoint(out / "model", result.params.named(), hyperparameters=hyper)
    (out / "train_log.txt").write_text("\n".join(log_lines) + "\n")
    (out / "history.json").write_text(
        json.dumps(result.history, indent=2, sort_keys=True) + "\n")
    print(f"wrote model checkpoint to {out / 'model'}.json/.bin")
    return 0


def _cmd_evaluate(args, out: Path) -> int:
    bundle = load(args.data)
    params, hyper, enc_config, estimator = _load_model(args, bundle)
    model_id = hyper["variant"] if hyper["variant"] != "full" \
        else f"full-{hyper['strategy']}"
    _, _, report = evaluate(bundle, params, enc_config, estimator=estimator,
                            split=args.split, pool=hyper["pool"],
                            horizon=hyper["horizon"], model_id=model_id)
    (out / "report.json").write_text(
        json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n")
    table = format_table(report)
    (out / "report.txt").write_text(table + "\n")
    print(table)
    return 0


def _cmd_predict(args, out: Path) -> int:
    bundle = load(args.data)
    params, hyper, enc_config, estimator = _load_model(args, bundle)
    samples, forecasts, _ = evaluate(bundle, params, enc_config,
                                     estimator=estimator, split=args.split,
                                     pool=hyper["pool"], horizon=hyper["horizon"])
    if args.anchor is not None:
        keep = [(s, f) for s, f in zip(samples, forecasts)
                if s.anchor_day == args.anchor]
        if not keep:
            raise ValueError(f"no window anchored at day {args.anchor} "
                             f"in split '{args.split}'")
        pairs = keep
    else:
        pairs = list(zip(samples, forecasts))
    lines = ["anchor_day,step,node,channel,value"]
    for sample, forecast in pairs:
        steps, nodes, channels = forecast.shape
        for s in range(steps):
            for n in range(nodes):
                for c in range(channels):
                    lines.append(f"{sample.anchor_day},{s + 1},{n},{c},"
                                 f"{repr(float(forecast[s, n, c]))}")
    (out / "forecast.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(pairs)} window forecasts to {out / 'forecast.csv'}")
    return 0


def _cmd_causal_report(args, out: Path) -> int:
    bundle = load(args.data)
    params, hyper, enc_config, estimator = _load_model(args, bundle)
    if estimator is None:
        raise ValueError("causal-report needs a full-variant checkpoint")
    norm = normalize(bundle)
    samples = window(norm, enc_config.flow_window, enc_config.poi_window,
                     hyper["horizon"], args.split)
    if not samples:
        raise ValueError(f"split '{args.split}' produced no windows")
    if args.anchor is None:
        sample = samples[-1]
    else:
        matches = [s for s in samples if s.anchor_day == args.anchor]
        if not matches:
            raise ValueError(f"no window anchored at day {args.anchor} "
                             f"in split '{args.split}'")
        sample = matches[0]

    estimator.record = []
    flow_path = fit_natural_cubic(
        np.linspace(0.0, 1.0, enc_config.flow_window), sample.flow_window)
    poi_path = fit_natural_cubic(
        np.linspace(0.0, 1.0, enc_config.poi_window), sample.poi_window)
    with no_grad():
        state = encode(flow_path, poi_path, params.encoder, estimator, enc_config)
    report = CausalEffectReport(
        obs_points=list(state.obs_times_flow),
        effects=[e for e, _ in estimator.record],
        weights=[w for _, w in estimator.record],
        strategy=estimator.strategy.kind)
    (out / "causal_report.csv").write_text(report_csv(report))
    summary = report_summary(report)
    (out / "causal_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"anchor day {sample.anchor_day}: top category "
          f"{summary['top_category']} "
          f"(mean weights {summary['mean_weight_per_category']})")
    return 0


# -- entry point ---------------------------------------------------------------

def main(argv=None) -> int:
    parser, submap = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config is not None:
            stored = json.loads(Path(args.config).read_text())
            sub = submap[args.command]
            known = {a.dest for a in sub._actions}
            sub.set_defaults(**{k: v for k, v in stored.items()
                                if k in known and k not in ("command", "config")})
            args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_resolved(args, out)
        return args.func(args, out)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

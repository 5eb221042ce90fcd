"""Command-line entry points: ingest, train, eval, ablate, gradcheck.

Options layer as defaults < --config JSON < explicit flags.  The config
file is a flat JSON object whose keys are the training options plus
"data"; an unknown key is an error rather than a silent ignore.  All
randomness descends from --seed, and VELF_THREADS caps any worker pool
(default 1, which is the deterministic mode).
"""

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields as dc_fields
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data, evaluation, training
from .diffgraph import (
    DomainError, Graph, GraphError, Tensor, grad_check, scaled_adjoint,
)
from .model import VelfModel
from .training import TrainConfig
from .varembed import UnseenIdError

GRADCHECK_TOL = 1e-4

_CFG_KEYS = {f.name for f in dc_fields(TrainConfig)} | {"data"}


class CliError(ValueError):
    pass


def _threads() -> int:
    raw = os.environ.get("VELF_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"VELF_THREADS must be an integer, got {raw!r}")
    return max(1, n)


def _load_config_file(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise CliError(f"config {path}: expected a flat JSON object")
    unknown = sorted(set(cfg) - _CFG_KEYS)
    if unknown:
        raise CliError(f"config {path}: unknown keys {unknown}")
    return cfg


def _resolve_train_config(args) -> tuple[TrainConfig, str]:
    merged = dict(getattr(args, "_file_cfg", {}))
    overrides = {
        "variant": args.variant,
        "seed": args.seed,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
        "dim": args.dim,
        "hidden": args.hidden,
        "n_layers": args.n_layers,
        "head": args.head,
        "anneal_steps": args.anneal_steps,
        "monte_carlo": args.monte_carlo,
        "gate_eps": args.gate_eps,
    }
    if getattr(args, "ids_only", False):
        overrides["include_attr_fields"] = False
    if getattr(args, "train_auc", False):
        overrides["log_train_auc"] = True
    for k, v in overrides.items():
        if v is not None:
            merged[k] = v
    data_dir = args.data if args.data is not None else merged.pop("data", None)
    merged.pop("data", None)
    if data_dir is None:
        raise CliError("no data directory: pass --data or set \"data\" in "
                       "the config file")
    try:
        cfg = TrainConfig(**merged).validate()
    except TypeError as e:
        raise CliError(f"bad config: {e}") from None
    return cfg, data_dir


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--data", help="split directory from `velf ingest`")
    p.add_argument("--variant", choices=training.VARIANTS)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--dim", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--n-layers", type=int)
    p.add_argument("--head", choices=training.HEADS)
    p.add_argument("--anneal-steps", type=int)
    p.add_argument("--monte-carlo", type=int)
    p.add_argument("--gate-eps", type=float)
    p.add_argument("--ids-only", action="store_true",
                   help="feed only the two ID fields to the head")
    p.add_argument("--train-auc", action="store_true",
                   help="log train AUC per epoch (slow)")


def cmd_ingest(args) -> int:
    raw = data.parse_movielens(args.data_dir)
    result = data.build_splits(raw, infreq_user_frac=args.infreq_user_frac,
                               infreq_item_frac=args.infreq_item_frac)
    data.write_split_dir(args.out, result)
    for name, count in result.stats["counts"].items():
        print(f"{name}: {count}")
    print(f"wrote {args.out}")
    return 0


def _write_epoch_log(path, epoch_log):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for entry in epoch_log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    cfg, data_dir = _resolve_train_config(args)
    ingest = data.load_split_dir(data_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def on_epoch(entry):
        print(json.dumps(entry, sort_keys=True))

    result = training.train(cfg, ingest.schema, ingest.splits.train,
                            on_epoch=on_epoch)
    ckpt.save_checkpoint(result, out / "checkpoint.velf")
    _write_epoch_log(out / "epochs.jsonl", result.epoch_log)
    print(f"wrote {out / 'checkpoint.velf'} and {out / 'epochs.jsonl'}")
    return 0


def _read_base_report(path) -> dict:
    splits = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                row = json.loads(line)
                splits[row["split"]] = row
    if not splits:
        raise CliError(f"base report {path} is empty")
    return {"splits": splits}


def cmd_eval(args) -> int:
    result = ckpt.load_checkpoint(args.checkpoint)
    ingest = data.load_split_dir(args.data)
    if ingest.schema != result.model.schema:
        raise CliError("split directory schema does not match the "
                       "checkpoint's schema")
    report = evaluation.evaluate_splits(result.model, ingest.splits)
    if args.base_report:
        evaluation.attach_rela_impr(report, _read_base_report(args.base_report))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = evaluation.report_lines(report)
    with open(out / "report.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    table = evaluation.render_table([(result.config.variant, report)])
    with open(out / "report.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(table + "\n")
    print(table)
    return 0


def _ablate_run(payload):
    split_dir, cfg_kwargs = payload
    ingest = data.load_split_dir(split_dir)
    cfg = TrainConfig(**cfg_kwargs)
    result = training.train(cfg, ingest.schema, ingest.splits.train)
    report = evaluation.evaluate_splits(result.model, ingest.splits)
    return cfg.variant, cfg.seed, report


def cmd_ablate(args) -> int:
    cfg, data_dir = _resolve_train_config(args)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    except ValueError:
        raise CliError(f"--seeds must be comma-separated ints, got "
                       f"{args.seeds!r}") from None
    if not seeds:
        raise CliError("--seeds must name at least one seed")
    jobs = []
    from dataclasses import asdict, replace
    for variant in training.VARIANTS:
        for seed in seeds:
            run_cfg = replace(cfg, variant=variant, seed=seed)
            jobs.append((data_dir, asdict(run_cfg)))
    threads = _threads()
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_ablate_run, jobs))
    else:
        results = [_ablate_run(j) for j in jobs]

    by_variant: dict[str, dict] = {v: {} for v in training.VARIANTS}
    for variant, seed, report in results:
        by_variant[variant][seed] = report

    summary = {"seeds": seeds, "variants": {}}
    mean_rows = []
    for variant in training.VARIANTS:
        per_seed = by_variant[variant]
        means = {}
        for name in evaluation.REPORT_ORDER:
            aucs = [per_seed[s]["splits"][name]["auc"] for s in seeds
                    if per_seed[s]["splits"][name]["auc"] is not None]
            means[name] = sum(aucs) / len(aucs) if aucs else None
        summary["variants"][variant] = {
            "mean_auc": means,
            "per_seed_auc": {
                str(s): {n: per_seed[s]["splits"][n]["auc"]
                         for n in evaluation.REPORT_ORDER}
                for s in seeds},
        }
        pseudo = {"splits": {n: {"auc": means[n], "count": None,
                                 "log_loss": None}
                             for n in evaluation.REPORT_ORDER}}
        mean_rows.append((variant, pseudo))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    table = evaluation.render_table(mean_rows)
    with open(out / "summary.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(table + "\n")
    print(table)
    return 0


# -- gradcheck ----------------------------------------------------------

def _primitive_cases(rng):
    """(name, point, fn) per primitive, constants frozen per case."""
    c23 = rng.standard_normal((2, 3))
    w23 = rng.standard_normal((2, 3))
    c34 = rng.standard_normal((3, 4))
    w24 = rng.standard_normal((2, 4))
    w26 = rng.standard_normal((2, 6))
    bias_base = rng.standard_normal((4, 3))
    w43 = rng.standard_normal((4, 3))
    idx = np.array([0, 2, 2, 1])
    w3 = rng.standard_normal((1, 3))

    def weighted(w, wrap):
        return lambda g, x: g.reduce_sum(g.mul(wrap(g, x), g.const(w)))

    relu_point = np.where(np.abs(c23) < 0.1, 0.5, c23)
    return [
        ("matmul", rng.standard_normal((2, 3)),
         weighted(w24, lambda g, x: g.matmul(x, g.const(c34)))),
        ("add", rng.standard_normal((2, 3)),
         weighted(w23, lambda g, x: g.add(x, g.const(c23)))),
        ("mul", rng.standard_normal((2, 3)),
         weighted(w23, lambda g, x: g.mul(x, g.const(c23)))),
        ("concat", rng.standard_normal((2, 3)),
         weighted(w26, lambda g, x: g.concat([x, g.const(c23)]))),
        ("gather_rows", rng.standard_normal((3, 3)),
         weighted(np.vstack([w3, w3, w3, w3]),
                  lambda g, x: g.gather_rows(x, idx))),
        ("relu", relu_point, weighted(w23, lambda g, x: g.relu(x))),
        ("sigmoid", rng.standard_normal((2, 3)),
         weighted(w23, lambda g, x: g.sigmoid(x))),
        ("exp", rng.standard_normal((2, 3)),
         weighted(w23, lambda g, x: g.exp(x))),
        ("log", rng.uniform(0.2, 2.0, (2, 3)),
         weighted(w23, lambda g, x: g.log(x))),
        ("softplus", rng.standard_normal((2, 3)),
         weighted(w23, lambda g, x: g.softplus(x))),
        ("square", rng.standard_normal((2, 3)),
         weighted(w23, lambda g, x: g.square(x))),
        ("reduce_sum", bias_base,
         weighted(w43[:1, :], lambda g, x: g.reduce_sum(x, axis=0,
                                                        keepdims=True))),
        ("reduce_mean", bias_base,
         weighted(w43[:, :1], lambda g, x: g.reduce_mean(x, axis=1,
                                                         keepdims=True))),
    ]


def _primitive_suite(seed: int, points: int = 20):
    rows = []
    for k in range(points):
        rng = np.random.default_rng((seed, k))
        for name, point, fn in _primitive_cases(rng):
            err = grad_check(fn, point)
            rows.append((name, err))
    worst = {}
    for name, err in rows:
        worst[name] = max(worst.get(name, 0.0), err)
    return worst


def _toy_batch(rng, schema, m=6):
    cols = {f.name: rng.integers(0, f.size, size=m) for f in schema.fields}
    return data.Instances(cols, rng.integers(0, 2, size=m))


def _elbo_suite(variant: str, seed: int):
    """Max relative error per parameter tensor of the batch objective,
    double precision, frozen noise, sampled coordinates."""
    rng = np.random.default_rng((seed, 99))
    schema = data.FieldSchema((
        data.Field("user_id", "user_id", 7),
        data.Field("item_id", "item_id", 9),
        data.Field("ua", "user_attr", 5),
        data.Field("ia", "item_attr", 4),
        data.Field("ctx", "context", 3),
    ))
    batch = _toy_batch(rng, schema)
    fu = data.build_frequency_table(batch, schema)
    model = VelfModel.create(
        schema, fu[0], fu[1], variant=variant, dim=4, hidden=16, n_layers=3,
        head="deepfm", dtype=np.float64, seed=seed)
    # probe at a generic unit-scale point: the freshly created model has
    # 0.01-scale embeddings, which parks relu pre-activations within the
    # finite-difference step of their kinks
    for tensor in model.params().values():
        tensor.data[...] = rng.normal(0.0, 0.5, size=tensor.data.shape)
    noise = training.draw_noise(rng, len(batch), 4, 1, np.float64)
    alpha = 0.7

    def total() -> float:
        bd, _ = training.elbo_step(model, batch, alpha, noise)
        return bd.total

    _, grads = training.elbo_step(model, batch, alpha, noise)
    h = 1e-5
    f0 = total()
    results = {}
    for name, tensor in model.params().items():
        flat = tensor.data.reshape(-1)
        k = min(flat.size, 4)
        order = rng.permutation(flat.size)
        worst = 0.0
        probed = 0
        for c in order:
            if probed >= k:
                break
            orig = flat[c]
            flat[c] = orig + h
            fp = total()
            flat[c] = orig - h
            fm = total()
            flat[c] = orig
            # a relu kink inside the bracket makes the central difference
            # meaningless; it shows up as O(h) curvature where a smooth
            # coordinate gives O(h^2)
            if abs(fp + fm - 2.0 * f0) > 1e-7 and probed + 1 < flat.size:
                continue
            probed += 1
            numeric = (fp - fm) / (2 * h)
            analytic = grads[name].reshape(-1)[c]
            err = abs(analytic - numeric) / max(1.0, abs(analytic))
            worst = max(worst, err)
        results[name] = worst
    return results


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    failed = False

    print("primitive adjoints:")
    for name, err in _primitive_suite(seed).items():
        ok = err <= GRADCHECK_TOL
        failed |= not ok
        print(f"  {name:<12} max_rel_err={err:.3e} "
              f"{'PASS' if ok else 'FAIL'}")

    for variant in ("full", "point"):
        print(f"batch objective gradients, variant={variant}:")
        for name, err in _elbo_suite(variant, seed).items():
            ok = err <= GRADCHECK_TOL
            failed |= not ok
            print(f"  {name:<28} max_rel_err={err:.3e} "
                  f"{'PASS' if ok else 'FAIL'}")

    # the checker must notice a deliberately mis-scaled adjoint, or its
    # own passes mean nothing
    rng = np.random.default_rng(seed)
    c = rng.standard_normal((3, 3))
    point = rng.standard_normal((3, 3))

    def fn(g, x):
        return g.reduce_sum(g.mul(g.matmul(x, g.const(c)),
                                  g.const(np.ones((3, 3)))))

    with scaled_adjoint("matmul", 1.0 + 1e-2):
        detected = grad_check(fn, point) > GRADCHECK_TOL
    failed |= not detected
    print(f"self-test: perturbed adjoint "
          f"{'detected PASS' if detected else 'NOT DETECTED FAIL'}")

    print("gradcheck:", "FAIL" if failed else "PASS")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="velf",
        description="Variational embedding learning for cold-start CTR")
    sub = p.add_subparsers(dest="command", required=True)

    pi = sub.add_parser("ingest", help="parse a rating log and write splits")
    pi.add_argument("--data-dir", required=True,
                    help="directory with ratings.dat, users.dat, movies.dat")
    pi.add_argument("--out", required=True)
    pi.add_argument("--infreq-user-frac", type=float, default=0.2)
    pi.add_argument("--infreq-item-frac", type=float, default=0.2)
    pi.set_defaults(fn=cmd_ingest)

    pt = sub.add_parser("train", help="train one model")
    _add_train_flags(pt)
    pt.add_argument("--out", required=True)
    pt.set_defaults(fn=cmd_train)

    pe = sub.add_parser("eval", help="evaluate a checkpoint on the splits")
    pe.add_argument("--checkpoint", required=True)
    pe.add_argument("--data", required=True)
    pe.add_argument("--out", required=True)
    pe.add_argument("--base-report",
                    help="report.jsonl of a baseline run; adds RelaImpr")
    pe.set_defaults(fn=cmd_eval)

    pa = sub.add_parser("ablate", help="train and evaluate every variant")
    _add_train_flags(pa)
    pa.add_argument("--out", required=True)
    pa.add_argument("--seeds", default="0,1,2")
    pa.set_defaults(fn=cmd_ablate)

    pg = sub.add_parser("gradcheck", help="verify adjoints and objective "
                                          "gradients")
    pg.add_argument("--seed", type=int)
    pg.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "config", None):
            args._file_cfg = _load_config_file(args.config)
        return args.fn(args)
    except (CliError, GraphError, DomainError, UnseenIdError,
            data.ParseError, ckpt.CheckpointError,
            training.TrainingDivergedError, evaluation.UndefinedAucError,
            FileNotFoundError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end: train, eval, gradcheck, and sweep.

Runs are described by a flat ``key = value`` config file (``#`` starts a
comment). Unknown keys are rejected, and every training run writes the
fully resolved config back next to its artifacts, so a run directory is
always self-describing and re-runnable. All commands are deterministic
given the config: re-running produces byte-identical CSVs (wall-clock
timing is therefore left out of the CSV unless explicitly enabled).

Exit codes: 0 success, 1 usage or config error, 2 numerical failure
(training divergence or a failed gradient check).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .data import (
    Dataset,
    IdxFormatError,
    SyntheticSpec,
    load_idx_pair,
    load_mean,
    mean_subtract,
    save_mean,
    synth_blobs,
)
from .losses import LossConfig, diversity_penalty
from .model import (
    CheckpointError,
    MlpFeatureExtractor,
    WeakClassifierBank,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import Rng
from .trainer import SgdConfig, evaluate, grad_check, train

__all__ = ["ConfigError", "RunConfig", "parse_config_text", "config_to_text", "main"]


class ConfigError(Exception):
    """A config file or flag combination cannot be turned into a run."""


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs, expressible as a flat text file."""

    dataset: str = "synthetic"
    mnist_dir: str = ""
    mean_subtract: bool = False
    limit_train: int = 0
    synth_classes: int = 10
    synth_samples: int = 100
    synth_eval_samples: int = 50
    synth_dim: int = 16
    synth_noise: float = 1.0
    hidden_dims: tuple[int, ...] = (64,)
    feature_dim: int = 32
    margin: float = 0.0
    diversity_weight: float = 0.0
    heads: int = 1
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_drop_iters: tuple[int, ...] = (8000, 14000)
    lr_drop_factor: float = 0.1
    max_iters: int = 20000
    batch_size: int = 256
    seed: int = 0
    log_every: int = 100
    eval_every: int = 1000
    timing_in_csv: bool = False
    out_dir: str = "out"


def _parse_bool(tok: str) -> bool:
    low = tok.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {tok!r}")


def _parse_int_tuple(tok: str) -> tuple[int, ...]:
    parts = [p.strip() for p in tok.split(",")]
    return tuple(int(p) for p in parts if p)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# config key -> (dataclass field, parser). "lambda" is a keyword, hence
# the one naming indirection.
_KEY_TO_FIELD = {
    "dataset": ("dataset", str),
    "mnist_dir": ("mnist_dir", str),
    "mean_subtract": ("mean_subtract", _parse_bool),
    "limit_train": ("limit_train", int),
    "synth_classes": ("synth_classes", int),
    "synth_samples": ("synth_samples", int),
    "synth_eval_samples": ("synth_eval_samples", int),
    "synth_dim": ("synth_dim", int),
    "synth_noise": ("synth_noise", float),
    "hidden_dims": ("hidden_dims", _parse_int_tuple),
    "feature_dim": ("feature_dim", int),
    "margin": ("margin", float),
    "lambda": ("diversity_weight", float),
    "heads": ("heads", int),
    "base_lr": ("base_lr", float),
    "momentum": ("momentum", float),
    "weight_decay": ("weight_decay", float),
    "lr_drop_iters": ("lr_drop_iters", _parse_int_tuple),
    "lr_drop_factor": ("lr_drop_factor", float),
    "max_iters": ("max_iters", int),
    "batch_size": ("batch_size", int),
    "seed": ("seed", int),
    "log_every": ("log_every", int),
    "eval_every": ("eval_every", int),
    "timing_in_csv": ("timing_in_csv", _parse_bool),
    "out_dir": ("out_dir", str),
}
_FIELD_TO_KEY = {f: k for k, (f, _) in _KEY_TO_FIELD.items()}


def parse_config_text(text: str) -> RunConfig:
    """Parse ``key = value`` lines into a RunConfig; unknown keys fail."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, tok = line.partition("=")
        key, tok = key.strip(), tok.strip()
        if key not in _KEY_TO_FIELD:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        field_name, parse = _KEY_TO_FIELD[key]
        if field_name in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[field_name] = parse(tok)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    return RunConfig(**values)


def config_to_text(cfg: RunConfig) -> str:
    """Canonical serialization; parses back to an identical RunConfig."""
    lines = []
    for f in fields(RunConfig):
        lines.append(f"{_FIELD_TO_KEY[f.name]} = {_fmt(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def _load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(p.read_text())


_MNIST_STEMS = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "eval_images": "t10k-images-idx3-ubyte",
    "eval_labels": "t10k-labels-idx1-ubyte",
}


def _find_idx(directory: str, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        candidate = Path(directory) / name
        if candidate.exists():
            return candidate
    raise ConfigError(f"missing {stem}[.gz] in {directory or '(unset mnist_dir)'}")


def load_datasets(cfg: RunConfig):
    """(train, eval, mean-or-None) for the configured data source."""
    if cfg.dataset == "synthetic":
        per_class = cfg.synth_samples + cfg.synth_eval_samples
        spec = SyntheticSpec(
            num_classes=cfg.synth_classes,
            samples_per_class=per_class,
            dim=cfg.synth_dim,
            noise_std=cfg.synth_noise,
            seed=cfg.seed,
        )
        full = synth_blobs(spec)
        train_idx, eval_idx = [], []
        for c in range(cfg.synth_classes):
            base = c * per_class
            train_idx.extend(range(base, base + cfg.synth_samples))
            eval_idx.extend(range(base + cfg.synth_samples, base + per_class))
        train_ds, eval_ds = full.take(train_idx), full.take(eval_idx)
    elif cfg.dataset == "mnist":
        if not cfg.mnist_dir:
            raise ConfigError("dataset = mnist requires mnist_dir")
        train_ds = load_idx_pair(
            _find_idx(cfg.mnist_dir, _MNIST_STEMS["train_images"]),
            _find_idx(cfg.mnist_dir, _MNIST_STEMS["train_labels"]),
            num_classes=10,
        )
        eval_ds = load_idx_pair(
            _find_idx(cfg.mnist_dir, _MNIST_STEMS["eval_images"]),
            _find_idx(cfg.mnist_dir, _MNIST_STEMS["eval_labels"]),
            num_classes=10,
        )
    else:
        raise ConfigError(f"dataset must be 'synthetic' or 'mnist', got {cfg.dataset!r}")

    if cfg.limit_train:
        if cfg.limit_train < 0:
            raise ConfigError("limit_train must be non-negative")
        train_ds = train_ds.take(np.arange(min(cfg.limit_train, len(train_ds))))

    mean = None
    if cfg.mean_subtract:
        train_ds, eval_ds, mean = mean_subtract(train_ds, eval_ds)
    return train_ds, eval_ds, mean


def build_model(cfg: RunConfig, input_dim: int, num_classes: int):
    root = Rng(cfg.seed)
    dims = [input_dim, *cfg.hidden_dims, cfg.feature_dim]
    net = MlpFeatureExtractor(dims, root.spawn(11))
    bank = WeakClassifierBank(cfg.feature_dim, num_classes, cfg.heads, root.spawn(13))
    return net, bank


def _component_configs(cfg: RunConfig) -> tuple[LossConfig, SgdConfig]:
    try:
        loss_cfg = LossConfig(
            margin=cfg.margin,
            diversity_weight=cfg.diversity_weight,
            num_heads=cfg.heads,
        )
        sgd_cfg = SgdConfig(
            base_lr=cfg.base_lr,
            momentum=cfg.momentum,
            weight_decay=cfg.weight_decay,
            lr_drop_iters=cfg.lr_drop_iters,
            lr_drop_factor=cfg.lr_drop_factor,
            max_iters=cfg.max_iters,
            batch_size=cfg.batch_size,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return loss_cfg, sgd_cfg


def run_training(cfg: RunConfig, quiet: bool = False) -> dict:
    """Full training run plus artifact writing; shared by train and sweep."""
    loss_cfg, sgd_cfg = _component_configs(cfg)
    train_ds, eval_ds, mean = load_datasets(cfg)
    net, bank = build_model(cfg, train_ds.dim, train_ds.num_classes)

    report = train(
        net,
        bank,
        train_ds,
        loss_cfg,
        sgd_cfg,
        seed=cfg.seed,
        eval_dataset=eval_ds,
        log_every=cfg.log_every,
        eval_every=cfg.eval_every,
    )

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv(include_timing=cfg.timing_in_csv))
    (out / "resolved.cfg").write_text(config_to_text(cfg))
    save_checkpoint(out / "model.ckpt", net, bank)
    if mean is not None:
        save_mean(out / "mean.bin", mean)

    accuracy = report.final_eval_accuracy
    if not np.isfinite(accuracy):
        accuracy = evaluate(net, bank, eval_ds)
    final_div = sum(diversity_penalty(bank.heads, v) for v in range(bank.num_heads)) if bank.num_heads >= 2 else 0.0

    if not quiet:
        if report.diverged:
            print("training diverged; partial report kept", file=sys.stderr)
        print(f"final eval accuracy: {accuracy:.6f}")
    return {
        "report": report,
        "net": net,
        "bank": bank,
        "accuracy": accuracy,
        "diversity": final_div,
        "diverged": report.diverged,
    }


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    result = run_training(cfg)
    return 2 if result["diverged"] else 0


def _topk_hits(scores: np.ndarray, labels: np.ndarray, k: int) -> int:
    top = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return int(np.sum(top == labels[:, None]))


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    try:
        net, bank = load_checkpoint(args.checkpoint)
    except (OSError, CheckpointError) as exc:
        raise ConfigError(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc

    train_ds, eval_ds, _ = _replay_preprocessing(cfg, Path(args.checkpoint).parent)
    ds = train_ds if args.split == "train" else eval_ds
    if ds.dim != net.input_dim:
        raise ConfigError(
            f"checkpoint expects input dim {net.input_dim}, dataset has {ds.dim}"
        )

    clf = bank.assemble()
    top1_hits = 0
    top5_hits = 0
    want_top5 = bank.num_classes >= 5
    for start in range(0, len(ds), 4096):
        x = ds.features[start : start + 4096]
        y = ds.labels[start : start + 4096]
        feats, _ = net.forward(x)
        scores = clf.scores(feats)
        top1_hits += int(np.sum(np.argmax(scores, axis=1) == y))
        if want_top5:
            top5_hits += _topk_hits(scores, y, 5)
    print(f"top1 accuracy: {top1_hits / len(ds):.6f}")
    if want_top5:
        print(f"top5 accuracy: {top5_hits / len(ds):.6f}")
    return 0


def _replay_preprocessing(cfg: RunConfig, artifact_dir: Path):
    """Rebuild datasets for eval, reusing the stored training mean if any."""
    if not cfg.mean_subtract:
        return load_datasets(cfg)
    raw_cfg = replace(cfg, mean_subtract=False)
    train_ds, eval_ds, _ = load_datasets(raw_cfg)
    mean_path = artifact_dir / "mean.bin"
    if mean_path.exists():
        mean = load_mean(mean_path)
        if mean.shape[0] != train_ds.dim:
            raise ConfigError(
                f"stored mean has dim {mean.shape[0]}, dataset has {train_ds.dim}"
            )
        train_ds = Dataset(
            train_ds.features - mean, train_ds.labels, train_ds.num_classes,
            train_ds.synthetic,
        )
        eval_ds = Dataset(
            eval_ds.features - mean, eval_ds.labels, eval_ds.num_classes,
            eval_ds.synthetic,
        )
        return train_ds, eval_ds, mean
    return mean_subtract(train_ds, eval_ds)


def _rand_int(rng: Rng, lo: int, hi: int) -> int:
    """Uniform integer in [lo, hi] from one uniform draw."""
    u = float(rng.uniform((1,))[0])
    return lo + min(int(u * (hi - lo + 1)), hi - lo)


def run_gradcheck_grid(
    seed: int,
    instances: int,
    tolerance: float = 1e-5,
    corrupt_block: str | None = None,
    printer=print,
) -> tuple[bool, float]:
    """Finite-difference certification over the standard config grid.

    Grid: margin in {0, 1}, lambda in {0, 0.1}, heads in {1, 2, 3}, with
    ``instances`` random small problems per cell (d <= 5, K <= 4,
    n <= 3). Returns (all passed, worst relative error).
    """
    root = Rng(seed)
    worst = 0.0
    all_ok = True
    cell = 0
    for m in (0.0, 1.0):
        for lam in (0.0, 0.1):
            for v in (1, 2, 3):
                cell += 1
                cell_worst = 0.0
                for j in range(instances):
                    r = root.spawn(cell * 100003 + j)
                    d = _rand_int(r, 2, 5)
                    k = _rand_int(r, 2, 4)
                    n = _rand_int(r, 1, 3)
                    bank = WeakClassifierBank(d, k, v, r.spawn(1))
                    x = r.spawn(2).normal((n, d))
                    labels = np.array(
                        [_rand_int(r, 0, k - 1) for _ in range(n)], dtype=np.int64
                    )
                    cfg = LossConfig(margin=m, diversity_weight=lam, num_heads=v)
                    res = grad_check(
                        None, bank, x, labels, cfg,
                        tolerance=tolerance, corrupt_block=corrupt_block,
                    )
                    cell_worst = max(cell_worst, res["max_error"])
                ok = cell_worst <= tolerance
                all_ok = all_ok and ok
                worst = max(worst, cell_worst)
                printer(
                    f"m={m:g} lambda={lam:g} V={v}: max rel err {cell_worst:.3e} "
                    f"[{'ok' if ok else 'FAIL'}]"
                )
    printer(f"overall max rel err {worst:.3e} [{'ok' if all_ok else 'FAIL'}]")
    return all_ok, worst


def cmd_gradcheck(args) -> int:
    ok, _ = run_gradcheck_grid(
        seed=args.seed if args.seed is not None else 0,
        instances=args.instances,
        tolerance=args.tolerance,
        corrupt_block=args.corrupt,
    )
    return 0 if ok else 2


_SWEEP_FIELDS = {"lambda": "diversity_weight", "v": "heads", "m": "margin"}


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)

    field_name = _SWEEP_FIELDS[args.sweep_param]
    tokens = [t.strip() for t in args.sweep_values.split(",") if t.strip()]
    if not tokens:
        raise ConfigError("sweep needs at least one value")
    try:
        if args.sweep_param == "v":
            parsed = [int(t) for t in tokens]
        else:
            parsed = [float(t) for t in tokens]
    except ValueError as exc:
        raise ConfigError(f"bad sweep value: {exc}") from exc

    if args.sweep_seeds:
        try:
            seeds = [int(t) for t in args.sweep_seeds.split(",") if t.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad sweep seed: {exc}") from exc
    else:
        seeds = [cfg.seed, cfg.seed + 1, cfg.seed + 2]
    if not seeds:
        raise ConfigError("sweep needs at least one seed")

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["value,seed,accuracy,div_term"]
    any_diverged = False
    for token, value in zip(tokens, parsed):
        accs, divs = [], []
        for s in seeds:
            cell_dir = out / f"{args.sweep_param}_{token}" / f"seed_{s}"
            cell_cfg = replace(cfg, seed=s, out_dir=str(cell_dir), **{field_name: value})
            result = run_training(cell_cfg, quiet=True)
            any_diverged = any_diverged or result["diverged"]
            accs.append(result["accuracy"])
            divs.append(result["diversity"])
            lines.append(
                f"{token},{s},{result['accuracy']:.6f},{result['diversity']:.10g}"
            )
        mean_acc = sum(accs) / len(accs)
        mean_div = sum(divs) / len(divs)
        lines.append(f"{token},mean,{mean_acc:.6f},{mean_div:.10g}")
        print(f"{args.sweep_param}={token}: mean accuracy {mean_acc:.6f}")
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    if any_diverged:
        print("at least one sweep cell diverged", file=sys.stderr)
        return 2
    return 0


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors, per our convention."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="emsoftmax", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and write artifacts")
    p_train.add_argument("--config", help="key=value config file")
    p_train.add_argument("--out", help="output directory (overrides config)")
    p_train.add_argument("--seed", type=int, help="seed (overrides config)")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--config", help="config describing the dataset")
    p_eval.add_argument("--split", choices=("train", "eval"), default="eval")
    p_eval.set_defaults(func=cmd_eval)

    p_gc = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.add_argument("--instances", type=int, default=10, help="instances per grid cell")
    p_gc.add_argument("--tolerance", type=float, default=1e-5)
    p_gc.add_argument("--corrupt", help="corrupt one gradient block (harness self-test)")
    p_gc.set_defaults(func=cmd_gradcheck)

    p_sweep = sub.add_parser("sweep", help="one-axis hyperparameter sweep")
    p_sweep.add_argument("--config", help="base config for every cell")
    p_sweep.add_argument("--out", help="output directory (overrides config)")
    p_sweep.add_argument("--seed", type=int, help="base seed (overrides config)")
    p_sweep.add_argument(
        "--sweep-param", required=True, choices=sorted(_SWEEP_FIELDS),
        help="the single axis to sweep",
    )
    p_sweep.add_argument("--sweep-values", required=True, help="comma-separated values")
    p_sweep.add_argument("--sweep-seeds", help="comma-separated seeds (default: 3)")
    p_sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, IdxFormatError, CheckpointError) as exc:
        print(f"emsoftmax: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"emsoftmax: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

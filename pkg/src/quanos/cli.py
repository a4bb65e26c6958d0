"""Command-line front end and machine-readable artifact emission.

Subcommands: train, quanos, ans, attack, ablate, energy, report. Every
run resolves its output directory (--out-dir or QUANOS_OUT_DIR), writes
CSV artifacts there, and finishes with a manifest.json listing each
artifact with its content hash. CSV payloads carry no timestamps, so a
re-run with the same manifest reproduces them byte for byte; wall-clock
timings live only in the manifest.

Exit codes: 0 success, 1 domain error (bad data, corrupt checkpoint,
divergence), 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import AttackConfig, adversarial_accuracy, adversarial_loss, clean_accuracy
from .datasets import load_dataset, sample_subset
from .hardware import default_calibration_text, default_configs, network_report, parse_calibration, preset_dims
from .network import build_network, load_checkpoint, save_checkpoint
from .presets import preset_architecture, preset_plan
from .quantization import BitWidthPlan, plan_average_bits
from .sensitivity import ablation_curve, compute_ans
from .training import TrainConfig, quanos_procedure, train


class UsageError(ValueError):
    """Invalid flag value; reported with exit code 2."""


def _fmt(v) -> str:
    if isinstance(v, float) or isinstance(v, np.floating):
        return f"{float(v):.10g}"
    return str(v)


def write_csv(path: Path, header: list[str], rows: list[list]) -> Path:
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def emit_plotdata(series: dict[str, list[tuple]], dest: Path) -> list[Path]:
    """One (x, y) CSV per named series plus an index file of series names."""
    if not series:
        raise ValueError("no series to emit")
    dest.mkdir(parents=True, exist_ok=True)
    written = []
    for name in sorted(series):
        rows = [[x, y] for x, y in series[name]]
        written.append(write_csv(dest / f"{name}.csv", ["x", "y"], rows))
    written.append(
        write_csv(dest / "index.csv", ["series", "file"], [[n, f"{n}.csv"] for n in sorted(series)])
    )
    return written


class RunManifest:
    """Records inputs, outputs and timings of one CLI run."""

    def __init__(self, command: str, argv: list[str], config: dict):
        self.data = {
            "command": command,
            "argv": argv,
            "config": {k: v for k, v in sorted(config.items()) if not k.startswith("_")},
            "version": __version__,
            "input_hashes": {},
            "outputs": [],
            "timings": {},
        }
        self._t0 = time.monotonic()

    def add_input(self, path):
        p = Path(path)
        if p.is_file():
            self.data["input_hashes"][str(p)] = _sha256(p)

    def add_outputs(self, paths):
        for p in paths:
            self.data["outputs"].append({"path": Path(p).name, "sha256": _sha256(Path(p))})

    def write(self, out_dir: Path) -> Path:
        self.data["timings"]["wall_s"] = round(time.monotonic() - self._t0, 3)
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def verify_manifest(out_dir) -> list[str]:
    """Return the artifacts whose bytes no longer match the manifest."""
    out_dir = Path(out_dir)
    manifest = json.loads((out_dir / "manifest.json").read_text())
    bad = []
    for entry in manifest["outputs"]:
        p = out_dir / entry["path"]
        if not p.is_file() or _sha256(p) != entry["sha256"]:
            bad.append(entry["path"])
    return bad


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# -- argument plumbing -------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quanos", description=__doc__.split("\n")[0])
    parser.add_argument("--config", help="key = value config file; flags override it")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--out-dir", default=os.environ.get("QUANOS_OUT_DIR", "out"))
        p.add_argument("--seed", type=int, default=0)
        if data:
            p.add_argument("--data-dir", default=os.environ.get("QUANOS_DATA_DIR"))
            p.add_argument("--data-format", default="idx", choices=["idx", "cifar-binary"])

    p = sub.add_parser("train", help="plain or adversarial SGD training")
    common(p)
    p.add_argument("--arch", default="cnn-mnist", help="preset name or architecture file")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--adv-train", default="none", choices=["none", "fgsm", "pgd"])
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--alpha", type=float, default=2 / 255)
    p.add_argument("--steps", type=int, default=7)
    p.add_argument("--plan", help="bit-width plan (file, preset:NAME, or uniform:K)")

    p = sub.add_parser("quanos", help="full sensitivity-driven hybrid quantization run")
    common(p)
    p.add_argument("--arch", default="cnn-mnist")
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--epochs-before-ans", type=int, default=2)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--k-initial", type=int, default=16)
    p.add_argument("--ans-samples", type=int, default=1000)
    p.add_argument("--ans-eps", type=float, default=0.05)
    p.add_argument("--iterative", action="store_true")
    p.add_argument("--max-rounds", type=int, default=3)
    p.add_argument("--adv-train", default="none", choices=["none", "fgsm", "pgd"])
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--alpha", type=float, default=2 / 255)
    p.add_argument("--steps", type=int, default=7)

    p = sub.add_parser("ans", help="per-layer adversarial noise sensitivity")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--plot-data", action="store_true", help="also emit per-layer bar-plot series")

    p = sub.add_parser("attack", help="adversarial accuracy under FGSM or PGD")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--attack", default="fgsm", choices=["fgsm", "pgd"])
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--alpha", type=float, default=2 / 255)
    p.add_argument("--steps", type=int, default=7)
    p.add_argument("--pgd-random-start", action="store_true")
    p.add_argument("--limit", type=int, default=0, help="evaluate at most N test samples")

    p = sub.add_parser("ablate", help="ablation curve of one layer")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--layer", required=True)
    p.add_argument("--p-grid", default="0,0.25,0.5,0.75,0.9,0.99")
    p.add_argument("--attack", default="fgsm", choices=["fgsm", "pgd"])
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--alpha", type=float, default=2 / 255)
    p.add_argument("--steps", type=int, default=7)
    p.add_argument("--limit", type=int, default=0)

    p = sub.add_parser("energy", help="accelerator energy and memory report")
    common(p, data=False)
    p.add_argument("--preset", required=True, help="vgg19-cifar | resnet18-cifar | architecture preset")
    p.add_argument("--plan", required=True, help="plan file, preset:NAME, or uniform:K")
    p.add_argument("--baseline-plan", default="uniform:16")
    p.add_argument("--configs", default="standard")
    p.add_argument("--calibration", help="multiplier table file (default: built-in calibrated tables)")
    p.add_argument("--dump-calibration", action="store_true", help="write the default calibration table and exit")

    p = sub.add_parser("report", help="adversarial-loss comparison across checkpoints")
    common(p)
    p.add_argument("--compare", nargs="+", required=True, metavar="CKPT")
    p.add_argument("--eps-grid", default="0.05:0.3:0.05", help="start:stop:step (stop inclusive)")
    p.add_argument("--attack", default="fgsm", choices=["fgsm", "pgd"])
    p.add_argument("--alpha", type=float, default=2 / 255)
    p.add_argument("--steps", type=int, default=7)
    p.add_argument("--limit", type=int, default=0)
    return parser


def _apply_config_file(parser, argv):
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    path = Path(argv[i + 1])
    defaults = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        defaults[key.strip().replace("-", "_")] = val.strip()
    for action in parser._subparsers._group_actions[0].choices.values():
        known = {a.dest for a in action._actions}
        action.set_defaults(**{k: _coerce(v) for k, v in defaults.items() if k in known})
    return argv


def _coerce(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    if v.lower() in ("true", "false"):
        return v.lower() == "true"
    return v


def _load_data(args, split):
    if not args.data_dir:
        raise UsageError("--data-dir (or QUANOS_DATA_DIR) is required")
    return load_dataset(args.data_dir, args.data_format, split=split)


def _load_model(path):
    return load_checkpoint(Path(path).read_bytes())


def _resolve_arch(name: str) -> str:
    if Path(name).is_file():
        return Path(name).read_text()
    return preset_architecture(name)


def _resolve_plan(spec: str, layer_names) -> BitWidthPlan:
    if spec.startswith("preset:"):
        return preset_plan(spec.split(":", 1)[1])
    if spec.startswith("uniform:"):
        k = int(spec.split(":", 1)[1])
        return BitWidthPlan.uniform(layer_names, k)
    return BitWidthPlan.from_csv(Path(spec).read_text())


def _attack_cfg(args) -> AttackConfig:
    if args.eps < 0:
        raise UsageError(f"--eps must be >= 0, got {args.eps}")
    kind = getattr(args, "attack", "fgsm")
    return AttackConfig(
        kind=kind,
        epsilon=args.eps,
        alpha=getattr(args, "alpha", None) if kind == "pgd" else None,
        steps=getattr(args, "steps", 1) if kind == "pgd" else 1,
        seed=args.seed,
        random_start=getattr(args, "pgd_random_start", False),
    )


def _eps_grid(spec: str) -> list[float]:
    try:
        start, stop, step = (float(v) for v in spec.split(":"))
    except ValueError:
        raise UsageError(f"--eps-grid must be start:stop:step, got {spec!r}") from None
    if step <= 0 or stop < start:
        raise UsageError(f"--eps-grid {spec!r} is not an increasing grid")
    n = int(round((stop - start) / step)) + 1
    return [round(start + i * step, 12) for i in range(n)]


# -- subcommand bodies ---------------------------------------------------------------


def _cmd_train(args, out_dir, manifest):
    model = build_network(_resolve_arch(args.arch), seed=args.seed)
    if args.plan:
        model.set_plan(_resolve_plan(args.plan, model.quantizable_layers()))
    cfg = TrainConfig(
        epochs_total=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed,
        adv_train=args.adv_train,
        attack=None if args.adv_train == "none" else AttackConfig(
            kind=args.adv_train, epsilon=args.eps,
            alpha=args.alpha if args.adv_train == "pgd" else None,
            steps=args.steps if args.adv_train == "pgd" else 1, seed=args.seed),
    )
    metrics = train(model, _load_data(args, "train"), _load_data(args, "test"), cfg)
    outs = [write_csv(out_dir / "metrics.csv", ["epoch", "lr", "train_loss", "test_acc"],
                      [[m["epoch"], m["lr"], m["train_loss"], m.get("test_acc", "")] for m in metrics])]
    (out_dir / "model.ckpt").write_bytes(save_checkpoint(model))
    outs.append(out_dir / "model.ckpt")
    manifest.add_outputs(outs)
    print(f"trained {args.epochs} epochs; final test_acc={metrics[-1].get('test_acc')}")


def _cmd_quanos(args, out_dir, manifest):
    model = build_network(_resolve_arch(args.arch), seed=args.seed)
    cfg = TrainConfig(
        epochs_total=args.epochs, epochs_before_ans=args.epochs_before_ans,
        lr=args.lr, batch_size=args.batch_size, seed=args.seed,
        quanos="iterative" if args.iterative else "single", max_rounds=args.max_rounds,
        k_initial=args.k_initial, ans_samples=args.ans_samples, ans_eps=args.ans_eps,
        adv_train=args.adv_train,
        attack=None if args.adv_train == "none" else AttackConfig(
            kind=args.adv_train, epsilon=args.eps,
            alpha=args.alpha if args.adv_train == "pgd" else None,
            steps=args.steps if args.adv_train == "pgd" else 1, seed=args.seed),
    )
    model, plan, reports, metrics = quanos_procedure(model, _load_data(args, "train"), _load_data(args, "test"), cfg)
    outs = [
        write_csv(out_dir / "metrics.csv", ["epoch", "lr", "train_loss", "test_acc"],
                  [[m["epoch"], m["lr"], m["train_loss"], m.get("test_acc", "")] for m in metrics]),
        (out_dir / "plan.csv"),
    ]
    (out_dir / "plan.csv").write_text(plan.to_csv(), encoding="utf-8")
    for i, rep in enumerate(reports, 1):
        p = out_dir / f"ans_round{i}.csv"
        p.write_text(rep.to_csv(), encoding="utf-8")
        outs.append(p)
    (out_dir / "model.ckpt").write_bytes(save_checkpoint(model))
    outs.append(out_dir / "model.ckpt")
    manifest.add_outputs(outs)
    print(f"hybrid plan (avg {plan_average_bits(plan):.2f} bits): {plan.entries}")


def _cmd_ans(args, out_dir, manifest):
    manifest.add_input(args.ckpt)
    model = _load_model(args.ckpt)
    data = _load_data(args, "train")
    probe = sample_subset(data, min(args.samples, len(data)), seed=args.seed)
    report = compute_ans(model, probe, AttackConfig(kind="fgsm", epsilon=args.eps, seed=args.seed))
    outs = [out_dir / "ans.csv"]
    outs[0].write_text(report.to_csv(), encoding="utf-8")
    if args.plot_data:
        series = {"ans": [(i + 1, v) for i, (_, v) in enumerate(report.values.items())]}
        outs += emit_plotdata(series, out_dir / "plotdata")
    manifest.add_outputs(outs)
    print(report.to_csv().strip())


def _cmd_attack(args, out_dir, manifest):
    manifest.add_input(args.ckpt)
    model = _load_model(args.ckpt)
    data = _load_data(args, "test")
    if args.limit:
        data = sample_subset(data, min(args.limit, len(data)), seed=args.seed)
    cfg = _attack_cfg(args)
    clean = clean_accuracy(model, data)
    adv = adversarial_accuracy(model, data, cfg)
    rows = [[cfg.epsilon, clean, adv, adversarial_loss(clean, adv)]]
    outs = [write_csv(out_dir / "attack.csv", ["epsilon", "clean_acc", "adv_acc", "adv_loss"], rows)]
    manifest.add_outputs(outs)
    print(f"{cfg.kind} eps={cfg.epsilon}: clean={clean:.4f} adv={adv:.4f} loss={adversarial_loss(clean, adv):.2f}pp")


def _cmd_ablate(args, out_dir, manifest):
    manifest.add_input(args.ckpt)
    model = _load_model(args.ckpt)
    data = _load_data(args, "test")
    if args.limit:
        data = sample_subset(data, min(args.limit, len(data)), seed=args.seed)
    try:
        p_grid = [float(v) for v in args.p_grid.split(",")]
    except ValueError:
        raise UsageError(f"--p-grid must be comma-separated fractions, got {args.p_grid!r}") from None
    curve = ablation_curve(model, args.layer, data, _attack_cfg(args), p_grid)
    outs = [write_csv(out_dir / "ablation.csv", ["fraction", "adv_acc"], [[p, a] for p, a in curve])]
    manifest.add_outputs(outs)
    print("\n".join(f"p={p:g}: adv_acc={a:.4f}" for p, a in curve))


def _cmd_energy(args, out_dir, manifest):
    if args.dump_calibration:
        path = out_dir / "calibration.txt"
        path.write_text(default_calibration_text(), encoding="utf-8")
        manifest.add_outputs([path])
        print(f"wrote {path}")
        return
    hw = default_configs()
    if args.calibration:
        manifest.add_input(args.calibration)
        hw = parse_calibration(Path(args.calibration).read_text())
    dims = preset_dims(args.preset)
    names = [d.name for d in dims]
    if not args.plan.startswith(("preset:", "uniform:")):
        manifest.add_input(args.plan)
    plan = _resolve_plan(args.plan, names)
    baseline = _resolve_plan(args.baseline_plan, names)
    configs = args.configs.split(",")
    report = network_report(dims, plan, configs=configs, baseline=baseline, hw_configs=hw)

    rows = []
    for cfg_name in configs:
        for r in report.rows[cfg_name]:
            rows.append([cfg_name, r["layer"], r["k_b"], r["N_A"], r["N_C"], r["access_pj"], r["mac_pj"], r["total_pj"]])
    outs = [
        write_csv(out_dir / "energy.csv",
                  ["config", "layer", "k_b", "N_A", "N_C", "access_pj", "mac_pj", "total_pj"], rows),
        write_csv(out_dir / "energy_summary.csv",
                  ["config", "total_mj", "ratio_vs_baseline", "memory_gbit", "memory_ratio"],
                  [[c, report.total_energy_pj(c) / 1e9, report.energy_ratio(c),
                    report.total_memory_bits() / 1e9, report.memory_ratio()] for c in configs]),
    ]
    manifest.add_outputs(outs)
    print(report.summary_table())


def _cmd_report(args, out_dir, manifest):
    data = _load_data(args, "test")
    if args.limit:
        data = sample_subset(data, min(args.limit, len(data)), seed=args.seed)
    grid = _eps_grid(args.eps_grid)
    rows = []
    series = {}
    for ckpt in args.compare:
        manifest.add_input(ckpt)
        model = _load_model(ckpt)
        name = Path(ckpt).stem
        clean = clean_accuracy(model, data)
        pts = []
        for eps in grid:
            cfg = AttackConfig(
                kind=args.attack, epsilon=eps,
                alpha=args.alpha if args.attack == "pgd" else None,
                steps=args.steps if args.attack == "pgd" else 1, seed=args.seed)
            adv = adversarial_accuracy(model, data, cfg)
            loss = adversarial_loss(clean, adv)
            rows.append([name, eps, clean, adv, loss])
            pts.append((eps, loss))
        series[f"adv_loss_{name}"] = pts
    outs = [write_csv(out_dir / "report.csv", ["model", "epsilon", "clean_acc", "adv_acc", "adv_loss"], rows)]
    outs += emit_plotdata(series, out_dir / "plotdata")
    manifest.add_outputs(outs)
    for row in rows:
        print(f"{row[0]} eps={row[1]:g}: adv_loss={row[4]:.2f}pp")


_COMMANDS = {
    "train": _cmd_train,
    "quanos": _cmd_quanos,
    "ans": _cmd_ans,
    "attack": _cmd_attack,
    "ablate": _cmd_ablate,
    "energy": _cmd_energy,
    "report": _cmd_report,
}


def dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:
        return int(e.code or 0)
    out_dir = Path(args.out_dir)
    manifest = RunManifest(args.command, argv, {k: v for k, v in vars(args).items()})
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.config:
            manifest.add_input(args.config)
        _COMMANDS[args.command](args, out_dir, manifest)
        manifest.write(out_dir)
        return 0
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # domain errors: bad files, divergence, plan mismatch
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()

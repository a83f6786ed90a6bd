"""Command-line entry point.

Subcommands: synth, train, reconstruct, eval, bench, gradcheck.  Every run
resolves its configuration (defaults < --config file < explicit flags),
executes, and records the resolved configuration plus all output files in a
manifest.json next to the outputs.  Re-running a command with --config
pointed at a recorded manifest reproduces the outputs byte for byte in
single-threaded mode (measured wall times in bench.csv are the one
documented exception).

Exit codes: 0 success, 1 configuration or tolerance failure, 2 acceptance
ordering violated under --assert-acceptance, 3 training diverged.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict, fields

CONFIG_SECTIONS = ("synth", "train", "eval", "reconstruct", "bench")
_SYNTH_EXTRA_KEYS = ("n_sequences", "n_windows")
_EVAL_KEYS = ("fractions", "methods", "seed", "omega")
_RECON_KEYS = ("missing_fraction", "seed")
_BENCH_KEYS = ("missing_fraction", "n_windows", "seed")


def _fail(msg: str, code: int = 1):
    print(f"error: {msg}", file=sys.stderr)
    raise SystemExit(code)


def load_config_file(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        _fail(f"cannot read config {path}: {exc}")
    except json.JSONDecodeError as exc:
        _fail(f"config {path} is not valid JSON: {exc}")
    if "resolved_config" in cfg:  # accept a recorded manifest directly
        cfg = cfg["resolved_config"]
    unknown = set(cfg) - set(CONFIG_SECTIONS)
    if unknown:
        _fail(f"unknown config sections {sorted(unknown)}; "
              f"expected a subset of {list(CONFIG_SECTIONS)}")
    return cfg


def _check_keys(section: str, given: dict, allowed):
    unknown = set(given) - set(allowed)
    if unknown:
        _fail(f"unknown keys {sorted(unknown)} in config section '{section}'; "
              f"allowed: {sorted(allowed)}")


def _write_manifest(out_dir, command: str, resolved: dict, outputs,
                    inputs=None, notes=None):
    from . import __version__
    manifest = {
        "command": command,
        "package_version": __version__,
        "resolved_config": resolved,
        "inputs": inputs or {},
        "outputs": sorted(outputs),
    }
    if notes:
        manifest["notes"] = notes
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _prep_out_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        _fail(f"cannot create output directory {path}: {exc}")


def _build_synth_config(section: dict, seed_override):
    from .synth import ConfigError, SynthConfig
    allowed = [f.name for f in fields(SynthConfig)] + list(_SYNTH_EXTRA_KEYS)
    _check_keys("synth", section, allowed)
    n_sequences = int(section.get("n_sequences", 4))
    n_windows = int(section.get("n_windows", 40))
    kw = {k: v for k, v in section.items() if k not in _SYNTH_EXTRA_KEYS}
    for tup in ("q_range", "amp_range"):
        if tup in kw:
            kw[tup] = tuple(kw[tup])
    if seed_override is not None:
        kw["seed"] = seed_override
    cfg = SynthConfig(**kw)
    try:
        cfg.validate()
    except ConfigError as exc:
        _fail(str(exc))
    return cfg, n_sequences, n_windows


def cmd_synth(args):
    config = load_config_file(args.config) if args.config else {}
    base_cfg, n_sequences, n_windows = _build_synth_config(
        config.get("synth", {}), args.seed)
    if args.sequences is not None:
        n_sequences = args.sequences
    if args.windows is not None:
        n_windows = args.windows
    _prep_out_dir(args.out)

    from dataclasses import replace
    from .cirio import save_cir
    from .synth import synth_sequence

    entries, outputs = [], []
    for i in range(n_sequences):
        cfg_i = replace(base_cfg, seed=base_cfg.seed + i)
        seq = synth_sequence(cfg_i, n_windows)
        name = f"seq_{i:04d}.cir"
        path = os.path.join(args.out, name)
        try:
            save_cir(path, seq)
        except OSError as exc:
            _fail(f"cannot write {path}: {exc}")
        entries.append({"file": name, "seed": cfg_i.seed, "label": cfg_i.label,
                        "n_windows": n_windows})
        outputs.append(name)

    resolved = {"synth": {**asdict(base_cfg), "n_sequences": n_sequences,
                          "n_windows": n_windows}}
    resolved["synth"]["q_range"] = list(resolved["synth"]["q_range"])
    resolved["synth"]["amp_range"] = list(resolved["synth"]["amp_range"])
    data_manifest = os.path.join(args.out, "sequences.json")
    with open(data_manifest, "w") as fh:
        json.dump({"sequences": entries, "k": base_cfg.k,
                   "delta": base_cfg.delta}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    outputs.append("sequences.json")
    _write_manifest(args.out, "synth", resolved, outputs)
    print(f"wrote {n_sequences} sequences to {args.out}")
    return 0


def _load_dataset(data_dir):
    from .cirio import load_cir
    listing = os.path.join(data_dir, "sequences.json")
    if os.path.exists(listing):
        with open(listing) as fh:
            names = [e["file"] for e in json.load(fh)["sequences"]]
    else:
        names = sorted(n for n in os.listdir(data_dir)
                       if n.endswith(".cir") or n.endswith(".csv"))
    if not names:
        _fail(f"no CIR files found in {data_dir}")
    try:
        return [load_cir(os.path.join(data_dir, n)) for n in names], names
    except OSError as exc:
        _fail(f"cannot read dataset: {exc}")


def _build_train_config(section: dict, args):
    from .training import TrainConfig
    allowed = [f.name for f in fields(TrainConfig)]
    _check_keys("train", section, allowed)
    kw = dict(section)
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.np is not None:
        kw["n_past"] = args.np
    if getattr(args, "ablation", None) is not None:
        kw["ablation"] = args.ablation
    cfg = TrainConfig(**kw)
    try:
        cfg.validate()
    except ValueError as exc:
        _fail(str(exc))
    return cfg


def cmd_train(args):
    config = load_config_file(args.config) if args.config else {}
    cfg = _build_train_config(config.get("train", {}), args)
    dataset, names = _load_dataset(args.data)
    data_k = dataset[0].meta.get("config", {}).get("k")
    if data_k is not None and data_k != cfg.k:
        _fail(f"training config k={cfg.k} but dataset was generated with k={data_k}")
    _prep_out_dir(args.out)

    from .training import TrainingDivergedError, save_checkpoint, train

    ckpt_path = os.path.join(args.out, "checkpoint.bin")
    try:
        ckpt, history = train(dataset, cfg, log=print)
    except TrainingDivergedError as exc:
        if exc.last_good is not None:
            save_checkpoint(ckpt_path + ".last_good", exc.last_good)
            print(f"preserved last finite checkpoint at {ckpt_path}.last_good",
                  file=sys.stderr)
        _fail(f"training diverged: {exc}", code=3)
    save_checkpoint(ckpt_path, ckpt)
    hist_path = os.path.join(args.out, "history.csv")
    with open(hist_path, "w") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for row in history:
            fh.write(f"{row['epoch']},{row['train_loss']!r},{row['val_loss']!r}\n")
    resolved = {"train": asdict(cfg)}
    _write_manifest(args.out, "train", resolved,
                    ["checkpoint.bin", "history.csv"],
                    inputs={"data": args.data, "files": names})
    if history:
        print(f"final train loss {history[-1]['train_loss']:.6f}, "
              f"val loss {history[-1]['val_loss']:.6f}")
    print(f"checkpoint written to {ckpt_path}")
    return 0


def _write_spectrogram_csv(path, spec):
    k = spec.shape[1]
    with open(path, "w") as fh:
        fh.write("window," + ",".join(f"bin_{i}" for i in range(k)) + "\n")
        for t in range(spec.shape[0]):
            fh.write(str(t) + "," + ",".join(repr(float(v)) for v in spec[t])
                     + "\n")


def cmd_reconstruct(args):
    config = load_config_file(args.config) if args.config else {}
    section = dict(config.get("reconstruct", {}))
    _check_keys("reconstruct", section, _RECON_KEYS)
    fraction = args.missing_value if args.missing_value is not None else \
        float(section.get("missing_fraction", 0.0))
    seed = args.seed if args.seed is not None else int(section.get("seed", 0))
    if not 0 <= fraction < 1:
        _fail(f"missing fraction must be in [0, 1), got {fraction}")
    _prep_out_dir(args.out)

    import numpy as np
    from .cirio import load_cir
    from .metrics import write_pgm
    from .model import forward_sequence
    from .synth import CirSequence, frame_windows, gen_grid_mask
    from .training import CheckpointError, load_checkpoint

    try:
        ckpt = load_checkpoint(args.checkpoint)
    except (OSError, CheckpointError) as exc:
        _fail(f"cannot load checkpoint {args.checkpoint}: {exc}")
    params = ckpt.params
    try:
        seq = load_cir(args.cir)
    except OSError as exc:
        _fail(f"cannot read {args.cir}: {exc}")
    data_k = seq.meta.get("config", {}).get("k", params.k)
    if data_k != params.k:
        _fail(f"checkpoint K={params.k} does not match data K={data_k}")
    delta = seq.meta.get("config", {}).get("delta", params.k // 2)

    rng = np.random.default_rng(seed)
    mask = seq.grid_mask & gen_grid_mask(len(seq), fraction, rng, params.k, delta)
    masked = CirSequence(np.where(mask, seq.samples, 0.0), mask, seq.t_c,
                         seq.f_c, seq.meta)
    windows = frame_windows(masked, params.k, delta)
    spec = forward_sequence(windows, params)

    csv_path = os.path.join(args.out, "spectrogram.csv")
    _write_spectrogram_csv(csv_path, spec)
    write_pgm(os.path.join(args.out, "spectrogram.pgm"), spec)
    resolved = {"reconstruct": {"missing_fraction": fraction, "seed": seed}}
    _write_manifest(args.out, "reconstruct", resolved,
                    ["spectrogram.csv", "spectrogram.pgm"],
                    inputs={"checkpoint": args.checkpoint, "cir": args.cir})
    print(f"reconstructed {spec.shape[0]} windows at {fraction:.0%} missing")
    return 0


def _parse_missing(text):
    try:
        fractions = [float(x) for x in text.split(",") if x.strip() != ""]
    except ValueError:
        _fail(f"cannot parse --missing list {text!r}")
    for f in fractions:
        if not 0 <= f < 1:
            _fail(f"missing fraction {f} outside [0, 1)")
    return fractions


def cmd_eval(args):
    config = load_config_file(args.config) if args.config else {}
    section = dict(config.get("eval", {}))
    _check_keys("eval", section, _EVAL_KEYS)
    fractions = (_parse_missing(args.missing) if args.missing is not None
                 else [float(f) for f in section.get("fractions", [0.5, 0.75, 0.9])])
    seed = args.seed if args.seed is not None else int(section.get("seed", 0))
    _prep_out_dir(args.out)

    from .evaluate import (CLASSICAL_METHODS, method_label, sweep_missing,
                           sweep_rows_to_csv)
    from .training import CheckpointError, load_checkpoint

    dataset, names = _load_dataset(args.data)
    meta_cfg = dataset[0].meta.get("config", {})
    k = int(meta_cfg.get("k", 64))
    delta = int(meta_cfg.get("delta", k // 2))

    learned = {}
    for path in args.checkpoint or []:
        try:
            ckpt = load_checkpoint(path, expect_k=k)
        except (OSError, CheckpointError) as exc:
            _fail(f"cannot load checkpoint {path}: {exc}")
        learned[method_label(ckpt.params)] = ckpt.params
    if args.methods:
        methods = [m.strip() for m in args.methods.split(",")]
        for m in methods:
            if m not in learned and m not in CLASSICAL_METHODS:
                _fail(f"method {m!r} needs a checkpoint (have {sorted(learned)}) "
                      f"or must be one of {list(CLASSICAL_METHODS)}")
    else:
        methods = list(learned) + list(CLASSICAL_METHODS)

    if "omega" in section:
        omega = int(section["omega"])
    elif learned:
        omega = next(iter(learned.values())).omega
    else:
        omega = 5
    rows = sweep_missing(methods, fractions, dataset, learned,
                         omega=omega, k=k, delta=delta, seed=seed)
    csv_path = os.path.join(args.out, "sweep.csv")
    with open(csv_path, "w") as fh:
        fh.write(sweep_rows_to_csv(rows))
    resolved = {"eval": {"fractions": fractions, "methods": methods,
                         "seed": seed, "omega": omega}}
    _write_manifest(args.out, "eval", resolved, ["sweep.csv"],
                    inputs={"data": args.data, "files": names,
                            "checkpoints": list(args.checkpoint or [])},
                    notes="the median_ms_per_window column holds measured "
                          "wall times and varies between runs; all other "
                          "columns are deterministic")
    by = {(r.method, r.missing_fraction): r for r in rows}
    for r in rows:
        print(f"{r.method:24s} missing={r.missing_fraction:.2f} "
              f"rmse={r.rmse:.4f} ssim={r.ssim:.4f}")
    if args.assert_acceptance:
        top = max(fractions)
        if "learned" not in methods or "iht" not in methods:
            _fail("--assert-acceptance needs a full-model checkpoint "
                  "('learned') and the 'iht' method")
        if by[("learned", top)].rmse >= by[("iht", top)].rmse:
            _fail(f"acceptance ordering violated at missing={top}: "
                  f"learned rmse {by[('learned', top)].rmse:.4f} >= "
                  f"iht rmse {by[('iht', top)].rmse:.4f}", code=2)
        print("acceptance ordering holds")
    return 0


def cmd_bench(args):
    config = load_config_file(args.config) if args.config else {}
    section = dict(config.get("bench", {}))
    _check_keys("bench", section, _BENCH_KEYS)
    fraction = args.missing_value if args.missing_value is not None else \
        float(section.get("missing_fraction", 0.5))
    seed = args.seed if args.seed is not None else int(section.get("seed", 0))
    n_windows = int(section.get("n_windows", 64))
    _prep_out_dir(args.out)

    import numpy as np
    from .evaluate import bench_runtime, method_label
    from .model import count_params, param_init
    from .synth import (CirSequence, SynthConfig, frame_windows, gen_grid_mask,
                        synth_sequence)
    from .training import CheckpointError, load_checkpoint

    if args.data:
        dataset, _ = _load_dataset(args.data)
        seq = dataset[0]
        k = int(seq.meta.get("config", {}).get("k", 64))
        delta = int(seq.meta.get("config", {}).get("delta", k // 2))
    else:
        cfg = SynthConfig(seed=seed)
        seq = synth_sequence(cfg, n_windows)
        k, delta = cfg.k, cfg.delta
    if args.checkpoint:
        try:
            params = load_checkpoint(args.checkpoint[0], expect_k=k).params
        except (OSError, CheckpointError) as exc:
            _fail(f"cannot load checkpoint {args.checkpoint[0]}: {exc}")
    else:
        params = param_init(k, seed=seed)
    label = method_label(params)

    rng = np.random.default_rng(seed)
    mask = gen_grid_mask(len(seq), fraction, rng, k, delta)
    masked = CirSequence(np.where(mask, seq.samples, 0.0), mask, seq.t_c, seq.f_c)
    windows = frame_windows(masked, k, delta)

    rows = bench_runtime([label, "iht", "iht-1iter"], windows, {label: params},
                         omega=params.omega, mu=params.mu)
    by = {r.method: r for r in rows}
    speedup = by["iht"].median_ms_per_window / by[label].median_ms_per_window
    print(f"learnable parameters: {count_params(k, params.variant == 'learn-s')}")
    for r in rows:
        print(f"{r.method:12s} median {r.median_ms_per_window:8.3f} ms/window "
              f"({r.median_iterations:.0f} iterations)")
    print(f"speedup over converged iht: {speedup:.1f}x")

    csv_path = os.path.join(args.out, "bench.csv")
    with open(csv_path, "w") as fh:
        fh.write("method,median_ms_per_window,median_iterations,n_windows\n")
        for r in rows:
            fh.write(f"{r.method},{r.median_ms_per_window!r},"
                     f"{r.median_iterations!r},{r.n_windows}\n")
    resolved = {"bench": {"missing_fraction": fraction, "seed": seed,
                          "n_windows": n_windows}}
    _write_manifest(args.out, "bench", resolved, ["bench.csv"],
                    inputs={"checkpoint": list(args.checkpoint or [])},
                    notes="median_ms_per_window values are measured wall times "
                          "and vary between runs; all other columns are "
                          "deterministic")
    return 0


def cmd_gradcheck(args):
    ks = [int(x) for x in (args.k or "4,8").split(",")]
    seed = args.seed if args.seed is not None else 0

    import numpy as np
    from .model import param_init
    from .synth import CirWindow
    from .training import TrainConfig, backward, fd_gradients

    tol = 1e-4
    worst_overall = 0.0
    print("k  variant        tensor  rel_err")
    failures = []
    rows = []
    for k in ks:
        omega = min(5, max(1, k // 2))
        for vi, variant in enumerate(("none", "learn-s", "only-add",
                                      "no-attention")):
            rng = np.random.default_rng((seed, k, vi))
            params = param_init(k, seed=seed, omega=omega, variant=variant)
            params.w += rng.normal(scale=0.02, size=params.w.shape)
            params.u += rng.normal(scale=0.1, size=params.u.shape)
            params.v += rng.normal(scale=0.1, size=params.v.shape)
            params.b += rng.normal(scale=0.1, size=params.b.shape)
            mask = rng.random(k) >= 0.4
            if not mask.any():
                mask[0] = True
            vals = np.where(mask, rng.normal(size=k) + 1j * rng.normal(size=k), 0.0)
            win = CirWindow(vals, mask)
            buf = np.abs(rng.normal(size=(params.n_past, k)))
            y_gt = np.abs(rng.normal(size=k))
            z_gt = rng.normal(size=2 * k)
            cfg = TrainConfig(k=k, ablation=variant)
            _, grads = backward(win, buf, params, y_gt, z_gt, cfg)
            numeric = fd_gradients(win, buf, params, y_gt, z_gt, cfg)
            for name, num in numeric.items():
                ana = grads.tensors()[name]
                denom = max(float(np.linalg.norm(num)), 1e-12)
                rel = float(np.linalg.norm(ana - num)) / denom
                worst_overall = max(worst_overall, rel)
                rows.append((k, variant, name, rel))
                print(f"{k:<3d}{variant:<15s}{name:<8s}{rel:.3e}")
                if rel >= tol:
                    failures.append((k, variant, name, rel))
    if args.out:
        _prep_out_dir(args.out)
        with open(os.path.join(args.out, "gradcheck.csv"), "w") as fh:
            fh.write("k,variant,tensor,rel_err\n")
            for k, variant, name, rel in rows:
                fh.write(f"{k},{variant},{name},{rel!r}\n")
        _write_manifest(args.out, "gradcheck",
                        {"gradcheck": {"k": ks, "seed": seed}},
                        ["gradcheck.csv"])
    print(f"worst relative error {worst_overall:.3e} (tolerance {tol:.0e})")
    if failures:
        _fail(f"{len(failures)} gradient checks exceeded tolerance {tol}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mdrecon",
        description="Micro-Doppler reconstruction from incomplete channel windows")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config file (or a recorded manifest)")
        p.add_argument("--seed", type=int, default=None, help="override the seed")
        p.add_argument("--threads", type=int, default=1,
                       help="BLAS thread cap; 1 (default) for bit-exact reruns")
        if out_required:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("synth", help="generate synthetic CIR sequences")
    common(p)
    p.add_argument("--sequences", type=int, default=None)
    p.add_argument("--windows", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the learned reconstructor")
    common(p)
    p.add_argument("--data", required=True, help="directory of CIR files")
    p.add_argument("--ablation", choices=["none", "no-attention", "only-add",
                                          "learn-s"], default=None)
    p.add_argument("--np", type=int, default=None,
                   help="number of past windows in the attention buffer")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="reconstruct a spectrogram")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cir", required=True, help="input CIR file (.cir or .csv)")
    p.add_argument("--missing", dest="missing_value", type=float, default=None,
                   help="grid missing fraction in [0, 1)")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="missing-measurement sweep")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", action="append", default=None,
                   help="trained checkpoint (repeatable)")
    p.add_argument("--missing", default=None, help="comma list of fractions")
    p.add_argument("--methods", default=None, help="comma list of methods")
    p.add_argument("--assert-acceptance", action="store_true",
                   help="exit 2 unless the learned model beats iht at the "
                        "largest missing fraction")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="per-window runtime benchmark")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--checkpoint", action="append", default=None)
    p.add_argument("--missing", dest="missing_value", type=float, default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    common(p, out_required=False)
    p.add_argument("--out", default=None, help="optional output directory")
    p.add_argument("--k", default=None, help="comma list of window lengths")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        _fail("--threads must be >= 1")
    # cap BLAS pools before numpy loads; >1 trades bit-exactness for speed
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, str(args.threads))
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())

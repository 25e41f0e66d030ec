"""``lgr`` command-line entry point.

Subcommands: simulate, dataset, train, rollout, eval, export.  Exit codes are
0 on success, 1 on runtime errors and 2 on usage or configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import KEYS, RunConfig
from .errors import ConfigError, LgrError

log = logging.getLogger("lgr")

CASES = ("tgv", "rpf")


# -- argument parsing ------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file (flags override it)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--threads", type=int,
                   help="worker threads (default: LGR_THREADS or all cores)")
    p.add_argument("--json", action="store_true", help="print a JSON summary on stdout")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")


def _eval_flags(p: argparse.ArgumentParser, default_split: str) -> None:
    p.add_argument("--checkpoint", required=True,
                   help="checkpoint file, or 'zero' / 'oracle' for the scripted baselines")
    p.add_argument("--dataset", required=True, help="dataset directory with manifests")
    p.add_argument("--case", choices=CASES, help="flow case (default: from the checkpoint)")
    p.add_argument("--split", default=default_split, choices=("train", "valid", "test"))
    p.add_argument("--steps", type=int, help="rollout length")
    p.add_argument("--start", type=int, help="frame the rollout starts from")
    p.add_argument("--sinkhorn-every", type=int, help="Sinkhorn sampling interval (0 disables)")
    p.add_argument("--eps", type=float, help="Sinkhorn regularization")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lgr", description="SPH ground truth, GNS training and rollout evaluation.",
        epilog="Config keys: " + ", ".join(KEYS))
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("simulate", help="run the SPH solver and write one trajectory file")
    _common(p)
    p.add_argument("--case", choices=CASES, help="flow case")
    p.add_argument("--out", help="output file (default: <case>_<seed>.lgrt)")
    p.add_argument("--n-particles", type=int, help="number of particles")
    p.add_argument("--steps", type=int, help="solver steps")
    p.add_argument("--subsample", type=int, help="store every k-th step")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("dataset", help="generate all trajectories and split manifests")
    _common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--overwrite", action="store_true", help="replace existing dataset files")
    p.add_argument("--n-particles", type=int, help="particles per trajectory")
    p.add_argument("--tgv-steps", type=int, help="solver steps per TGV trajectory")
    p.add_argument("--rpf-steps", type=int, help="solver steps of the RPF trajectory")
    p.add_argument("--n-tgv", type=int, help="number of TGV trajectories")
    p.add_argument("--no-rpf", action="store_true", help="skip the RPF trajectory")
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="train a GNS on a dataset split")
    _common(p)
    p.add_argument("--case", choices=CASES, help="flow case")
    p.add_argument("--dataset", required=True, help="dataset directory with manifests")
    p.add_argument("--split", default="train", choices=("train", "valid", "test"))
    p.add_argument("--steps", type=int, help="training steps")
    p.add_argument("--batch-size", type=int, help="graphs per step")
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", help="roll out a model and write the predicted trajectory")
    _common(p)
    _eval_flags(p, "test")
    p.add_argument("--trajectory", type=int, default=0, help="index within the split")
    p.add_argument("--out", required=True, help="output trajectory file")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("eval", help="evaluate rollouts over a split (table of metrics)")
    _common(p)
    _eval_flags(p, "test")
    p.add_argument("--out", help="optional per-step metrics CSV (averaged over trajectories)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="write metrics or a per-particle field slice as CSV")
    _common(p)
    _eval_flags(p, "test")
    p.add_argument("--trajectory", type=int, default=0, help="index within the split")
    p.add_argument("--what", choices=("metrics", "field"), default="metrics")
    p.add_argument("--frame", type=int, help="rollout step for field slices (default: last)")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_export)
    return parser


def resolve_config(args, **overrides) -> RunConfig:
    cfg = RunConfig.load(args.config)
    pairs = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v
    cfg = cfg.merged(pairs)
    overrides.setdefault("seed", args.seed)
    overrides.setdefault("threads", args.threads)
    cfg = cfg.merged(overrides)
    if cfg.threads is None and os.environ.get("LGR_THREADS"):
        cfg = cfg.merged({"threads": os.environ["LGR_THREADS"]})
    if cfg.case not in CASES:
        raise ConfigError(f"unknown case {cfg.case!r}; expected one of {CASES}")
    log.info("resolved config:\n%s", cfg.dump())
    _set_threads(cfg.threads)
    return cfg


def _set_threads(n) -> None:
    if n is None:
        return
    import numba

    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def _emit(args, summary: dict, text: str) -> None:
    if args.json:
        print(json.dumps(summary, sort_keys=True, default=float))
    else:
        print(text)


# -- subcommands -----------------------------------------------------------

def cmd_simulate(args) -> int:
    from .dataset import write_trajectory
    from .sph import run_simulation

    cfg = resolve_config(args, case=args.case, n_particles=args.n_particles, n_steps=args.steps,
                         subsample_every=args.subsample)
    case_cfg = cfg.case_config()
    out = Path(args.out or f"{case_cfg.case}_{cfg.seed:03d}.lgrt")
    t0 = time.perf_counter()
    traj = run_simulation(case_cfg, cfg.seed)
    wall = time.perf_counter() - t0
    write_trajectory(traj, out)
    e_final = float(traj.kinetic_energies()[-1]) if traj.n_frames else float("nan")
    summary = {"file": str(out), "case": case_cfg.case, "n_particles": traj.n_particles,
               "steps": case_cfg.steps, "frames": traj.n_frames, "final_e_kin": e_final,
               "wall_time_s": wall}
    _emit(args, summary,
          f"wrote {out}: case={case_cfg.case} N={traj.n_particles} steps={case_cfg.steps} "
          f"frames={traj.n_frames} final E_kin={e_final:.6g} wall={wall:.1f}s")
    return 0


def cmd_dataset(args) -> int:
    from dataclasses import replace

    from .dataset import generate_dataset

    cfg = resolve_config(args, n_particles=args.n_particles, n_tgv_trajectories=args.n_tgv)
    tgv = cfg.case_config("tgv")
    rpf = None if args.no_rpf else cfg.case_config("rpf")
    if args.tgv_steps is not None:
        tgv = replace(tgv, n_steps=args.tgv_steps)
    if rpf is not None and args.rpf_steps is not None:
        rpf = replace(rpf, n_steps=args.rpf_steps)
    seeds = tuple(cfg.seed + k for k in range(cfg.n_tgv_trajectories))
    t0 = time.perf_counter()
    manifests = generate_dataset(args.out, tgv, rpf, tgv_seeds=seeds,
                                 rpf_seed=cfg.seed + cfg.rpf_seed_offset,
                                 overwrite=args.overwrite, tgv_counts=cfg.tgv_split,
                                 rpf_counts=cfg.rpf_split, log=log.info)
    summary = {"out": str(args.out), "wall_time_s": time.perf_counter() - t0}
    for case, man in manifests.items():
        summary[case] = {sp: len(man.split(sp)) for sp in ("train", "valid", "test")}
    lines = [f"dataset in {args.out}"]
    for case, man in manifests.items():
        lines.append(f"  {case}: " + ", ".join(
            f"{sp} {len(man.split(sp))} entries" for sp in ("train", "valid", "test")))
    _emit(args, summary, "\n".join(lines))
    return 0


def _load_split(dataset, case: str, split: str):
    from .dataset import SplitManifest, load_split

    man_path = Path(dataset) / f"{case}_manifest.txt"
    if not man_path.exists():
        raise FileNotFoundError(f"no {case} manifest in {dataset}")
    return load_split(SplitManifest.read(man_path), dataset, split)


def _radius(traj, factor: float) -> float:
    from .neighbor import average_interparticle_distance

    return factor * average_interparticle_distance(traj.n_particles, traj.box)


def cmd_train(args) -> int:
    from .features import SampleSource, compute_norm_stats
    from .gns import AdamState, GnsModel, save_checkpoint, train

    cfg = resolve_config(args, case=args.case, steps=args.steps, batch_size=args.batch_size,
                         lr_init=args.lr)
    trajs = _load_split(args.dataset, cfg.case, args.split)
    stats = compute_norm_stats(trajs)
    force = cfg.uses_force()
    radius = _radius(trajs[0], cfg.radius_factor)
    node_in = 3 * cfg.history + (3 if force else 0)
    meta = {"case": cfg.case, "history": cfg.history, "radius": radius, "force_concat": force,
            "noise_std": cfg.noise_std}
    model = GnsModel(cfg.gns_spec(node_in), stats, seed=cfg.seed, meta=meta)
    adam = AdamState.for_model(model, **cfg.adam_hyper())
    source = SampleSource(trajs, cfg.history, radius, stats, cfg.noise_std, force, cfg.seed)
    t0 = time.perf_counter()
    window = []

    def progress(i, value):
        window.append(value)
        if (i + 1) % cfg.log_every == 0:
            log.info("step %d loss %.5g (mean of last %d)", i + 1, np.mean(window), len(window))
            window.clear()

    losses = train(model, adam, source, cfg.steps, cfg.batch_size, progress)
    save_checkpoint(model, adam, args.out)
    summary = {"checkpoint": str(args.out), "steps": cfg.steps, "n_params": model.n_params,
               "final_loss": float(losses[-1]) if losses else None,
               "wall_time_s": time.perf_counter() - t0}
    last = f"{losses[-1]:.5g}" if losses else "n/a"
    _emit(args, summary, f"wrote {args.out}: {model.n_params} parameters, {cfg.steps} steps, "
                         f"final loss {last}")
    return 0


class _Setup:
    """Predictor plus the feature settings it needs."""

    def __init__(self, args, cfg: RunConfig):
        from .evalx import GroundTruthOracle, ZeroAcceleration
        from .features import compute_norm_stats
        from .gns import load_checkpoint

        self.model = None
        if args.checkpoint in ("zero", "oracle"):
            self.case = cfg.case
            self.trajs = _load_split(args.dataset, self.case, args.split)
            self.history = cfg.history
            self.radius = _radius(self.trajs[0], cfg.radius_factor)
            self.force = cfg.uses_force(self.case)
            self.stats = compute_norm_stats(self.trajs)
            self.n_params = 0
            self.kind = args.checkpoint
        else:
            self.model, _ = load_checkpoint(args.checkpoint)
            meta = self.model.meta
            self.case = args.case or meta.get("case", cfg.case)
            self.trajs = _load_split(args.dataset, self.case, args.split)
            self.history = int(meta.get("history", cfg.history))
            self.radius = float(meta.get("radius", _radius(self.trajs[0], cfg.radius_factor)))
            self.force = bool(meta.get("force_concat", cfg.uses_force(self.case)))
            self.stats = self.model.stats
            self.n_params = self.model.n_params
            self.kind = "model"
        self._zero = ZeroAcceleration()
        self._oracle = GroundTruthOracle

    def predictor(self, traj):
        if self.kind == "zero":
            return self._zero
        if self.kind == "oracle":
            return self._oracle(traj.positions(), traj.box)
        return self.model

    def run(self, traj, cfg: RunConfig, steps: int, start: int | None):
        from .evalx import rollout_from_trajectory

        start = self.history if start is None else start
        return rollout_from_trajectory(self.predictor(traj), traj, start, self.history, steps,
                                       self.radius, self.stats, self.force)


def _eval_config(args) -> RunConfig:
    return resolve_config(args, case=args.case, rollout_steps=args.steps,
                          rollout_start=args.start, sinkhorn_every=args.sinkhorn_every,
                          eps=args.eps)


def cmd_rollout(args) -> int:
    from .dataset import write_trajectory

    cfg = _eval_config(args)
    setup = _Setup(args, cfg)
    traj = setup.trajs[args.trajectory]
    pred, _ = setup.run(traj, cfg, cfg.rollout_steps, cfg.rollout_start)
    write_trajectory(pred, args.out)
    summary = {"file": str(args.out), "frames": pred.n_frames, "n_particles": pred.n_particles}
    _emit(args, summary, f"wrote {args.out}: {pred.n_frames} predicted frames")
    return 0


def _evaluate(setup: _Setup, cfg: RunConfig, trajs) -> list:
    from .evalx import evaluate

    reports = []
    for traj in trajs:
        pred, ref = setup.run(traj, cfg, cfg.rollout_steps, cfg.rollout_start)
        rep = _quiet_sinkhorn(evaluate, pred, ref, cfg)
        reports.append(rep)
    return reports


def _quiet_sinkhorn(evaluate, pred, ref, cfg):
    import warnings

    from .errors import NotConverged

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", NotConverged)
        rep = evaluate(pred, ref, cfg.sinkhorn_every, cfg.eps, cfg.sinkhorn_points, cfg.seed,
                       max_iter=cfg.sinkhorn_max_iter, tol=cfg.sinkhorn_tol)
    bad = [w.message for w in caught if isinstance(w.message, NotConverged)]
    if bad:
        log.warning("Sinkhorn hit the iteration cap on %d evaluation(s); worst marginal "
                    "violation %.3g", len(bad), max(b.violation for b in bad))
    for w in caught:
        if not isinstance(w.message, NotConverged):
            warnings.warn_explicit(w.message, w.category, w.filename, w.lineno)
    return rep


def _timing(setup: _Setup, cfg: RunConfig, traj) -> float:
    from .evalx import measure_inference_time

    pos = traj.positions()[:setup.history + 1]
    return measure_inference_time(setup.predictor(traj), pos, traj.box, setup.radius,
                                  setup.stats, cfg.timing_repeats)


TABLE_ROWS = ("MSE_p", "MSE_Ekin", "Sinkhorn", "Time [ms]", "# params")


def format_table(summary: dict) -> str:
    width = max(len(r) for r in TABLE_ROWS)
    lines = []
    for row in TABLE_ROWS:
        v = summary[row]
        cell = f"{v:d}" if isinstance(v, int) else f"{v:.4g}"
        lines.append(f"{row:<{width}}  {cell}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    from .evalx import export_csv, combine_reports

    cfg = _eval_config(args)
    setup = _Setup(args, cfg)
    reports = _evaluate(setup, cfg, setup.trajs)
    summary = {
        "MSE_p": float(np.mean([r.MSE_p for r in reports])),
        "MSE_Ekin": float(np.mean([r.MSE_Ekin for r in reports])),
        "Sinkhorn": float(np.nanmean([r.sinkhorn_mean for r in reports]))
        if cfg.sinkhorn_every else float("nan"),
        "Time [ms]": _timing(setup, cfg, setup.trajs[0]),
        "# params": int(setup.n_params),
    }
    if args.out:
        export_csv(combine_reports(reports), args.out, "metrics")
    header = (f"case={setup.case} split={args.split} trajectories={len(reports)} "
              f"steps={cfg.rollout_steps} predictor={setup.kind}")
    _emit(args, summary, header + "\n" + format_table(summary))
    return 0


def cmd_export(args) -> int:
    from .evalx import export_csv

    cfg = _eval_config(args)
    setup = _Setup(args, cfg)
    traj = setup.trajs[args.trajectory]
    if args.what == "metrics":
        (rep,) = _evaluate(setup, cfg, [traj])
        export_csv(rep, args.out, "metrics")
        rows = rep.n_steps
    else:
        pred, ref = setup.run(traj, cfg, cfg.rollout_steps, cfg.rollout_start)
        k = pred.n_frames - 1 if args.frame is None else args.frame - 1
        if not 0 <= k < pred.n_frames:
            raise IndexError(f"--frame must be in 1..{pred.n_frames}")
        export_csv(pred.frames[k], args.out, "field", ref.frames[k], ref.box)
        rows = pred.n_particles
    _emit(args, {"file": str(args.out), "rows": rows}, f"wrote {args.out}: {rows} rows")
    return 0


# -- entry point -----------------------------------------------------------

def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"lgr {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (LgrError, OSError, ValueError, IndexError) as exc:
        print(f"lgr {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

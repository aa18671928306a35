"""Command line for the collision-risk toolkit.

Subcommands: gen-data, train, eval, experiment, predict, anova, inspect.
Every command is reproducible from (config, seed): outputs embed the seed
and a config hash, and re-running with the same inputs produces
byte-identical primary outputs.

Exit codes: 0 success, 1 usage/config error, 2 data/model error.
"""

import argparse
import multiprocessing
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import config as cfgmod
from . import data as datamod
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError
from .dropout import mix64, run_sfp
from .network import init_params
from .report import file_sha256, read_csv, svg_bar_chart, svg_line_chart, write_csv
from .sim import ScenarioSpec, bisect_delay_threshold, run_scenario
from .stats import (
    accuracy_of,
    anova_oneway,
    classify_uncertainty,
    fit_gaussian,
    histogram,
    mcc_of,
    mean_std,
)
from .training import evaluate, run_kfold, train

CAMERA_SWEEP = (
    ("left_mirror", ("left_mirror",)),
    ("dashcam", ("dashcam",)),
    ("right_mirror", ("right_mirror",)),
    ("all3", ("left_mirror", "dashcam", "right_mirror")),
)
INPUT_MODE_SWEEP = ("images_only", "images_state", "images_state_action")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_common(p):
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override one configuration key")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")


def build_parser():
    parser = _Parser(prog="crashcast",
                     description="collision-risk prediction: simulate, train, analyze")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="simulate episodes and write a dataset file")
    _add_common(p)
    p.add_argument("--out", required=True, help="output dataset path (.dpmd)")

    p = sub.add_parser("train", help="train a model on a dataset")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output checkpoint path (.dpmw)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", help="metrics CSV (default: print only)")

    p = sub.add_parser("experiment", help="k-fold sweep over input modes or cameras")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--sweep", choices=("input_mode", "camera"), required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--fold-unit", choices=("episodes", "samples"),
                   help="override eval.fold_unit")

    p = sub.add_parser("predict", help="stochastic forward passes for one sample")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--index", type=int, required=True, help="sample index in the dataset")
    p.add_argument("--sfp", type=int, help="number of stochastic passes (default eval.sfp_passes)")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("anova", help="mean/std and one-way ANOVA from a per-fold CSV")
    _add_common(p)
    p.add_argument("--folds", required=True, help="CSV with columns group,value")
    p.add_argument("--out", help="output CSV (default: print only)")

    p = sub.add_parser("inspect", help="per-class (and per-scenario) dataset counts")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="output CSV (default: print only)")
    return parser


def _provenance(args, cfg, extra=None):
    out = {"seed": args.seed, "config_sha256": cfg.config_hash()}
    if extra:
        out.update(extra)
    return out


def _gen_episode(task):
    sid, delay, dt, max_duration, cams, world, horizon = task
    episode = run_scenario(ScenarioSpec(sid, delay, dt=dt, max_duration=max_duration),
                           cams, world)
    return sid, episode.label, datamod.truncate_episode(episode, horizon)


def cmd_gen_data(args):
    cfg = cfgmod.load_config(args.config, args.overrides)
    world = cfgmod.world_config(cfg)
    cams = cfgmod.camera_specs(cfg)
    d_star = bisect_delay_threshold(1, world, dt=cfg.sim.dt,
                                    max_duration=cfg.sim.max_duration)
    lo = max(0.0, d_star - cfg.sim.delay_window)
    hi = d_star + cfg.sim.delay_window
    tasks = []
    for sid in cfg.sim.scenarios:
        rng = np.random.default_rng(mix64(args.seed, sid))
        for delay in rng.uniform(lo, hi, cfg.sim.episodes_per_scenario):
            tasks.append((sid, float(delay), cfg.sim.dt, cfg.sim.max_duration,
                          cams, world, cfg.data.horizon))
    if args.jobs > 1:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=args.jobs, mp_context=ctx) as pool:
            results = list(pool.map(_gen_episode, tasks, chunksize=4))
    else:
        results = [_gen_episode(t) for t in tasks]

    samples = []
    scenario_of_episode = {}
    per_scenario = {sid: {"episodes": 0, "collision_episodes": 0,
                          "samples": 0, "collision_samples": 0}
                    for sid in cfg.sim.scenarios}
    for eid, (sid, label, frames) in enumerate(results):
        scenario_of_episode[eid] = sid
        stats = per_scenario[sid]
        stats["episodes"] += 1
        stats["collision_episodes"] += label
        windows = datamod.windowize(frames, cfg.data.seq_len, cfg.data.window_stride,
                                    label=label, episode_id=eid,
                                    cameras=tuple(cfg.sim.cameras))
        stats["samples"] += len(windows)
        stats["collision_samples"] += len(windows) * label
        samples.extend(windows)
    if not samples:
        raise ValueError("generation produced no samples; check episode and window settings")

    assembled = datamod.assemble_dataset(samples, rng_seed=mix64(args.seed, 999),
                                         split=cfg.data.split)
    datamod.serialize_dataset(assembled.samples, args.out)
    datamod.write_meta(assembled.samples, scenario_of_episode, args.out + ".meta.csv")

    rows = []
    for sid in cfg.sim.scenarios:
        s = per_scenario[sid]
        rows.append([sid, s["episodes"], s["collision_episodes"],
                     s["samples"], s["collision_samples"]])
    n_coll = sum(s.label for s in assembled.samples)
    collision_episodes = sum(r[2] for r in rows)
    rows.append(["total", len(results), collision_episodes,
                 len(assembled.samples), n_coll])
    write_csv(args.out + ".gen.csv",
              ["scenario", "episodes", "collision_episodes", "samples", "collision_samples"],
              rows,
              _provenance(args, cfg, {"delay_threshold": repr(d_star),
                                      "dataset_sha256": file_sha256(args.out)}))
    print(f"wrote {len(assembled.samples)} samples ({n_coll} collision, "
          f"{len(assembled.samples) - n_coll} no-collision) from {len(results)} episodes "
          f"to {args.out}")
    print(f"delay threshold {d_star:.3f} s, sampling window [{lo:.3f}, {hi:.3f}] s")
    return 0


def _load_split(cfg, path):
    dataset = datamod.deserialize_dataset(path)
    n = len(dataset.samples)
    n_train = int(np.floor(cfg.data.split[0] * n))
    n_val = int(np.floor(cfg.data.split[1] * n))
    trainset = dataset.samples[:n_train]
    valset = dataset.samples[n_train : n_train + n_val]
    testset = dataset.samples[n_train + n_val :]
    return dataset, trainset, valset, testset


def cmd_train(args):
    cfg = cfgmod.load_config(args.config, args.overrides)
    dataset, trainset, valset, _testset = _load_split(cfg, args.data)
    if not trainset:
        raise ValueError("training split is empty; adjust data.split")
    net_config = cfgmod.network_config(cfg)
    _check_model_fits_dataset(net_config, dataset)
    params = init_params(net_config, seed=mix64(args.seed, 1))
    tc = cfgmod.train_config(cfg, rng_seed=mix64(args.seed, 2))
    spec = cfgmod.dropout_spec(cfg)
    trained, report = train(params, net_config, tc, trainset, valset, spec)
    save_checkpoint(args.out, net_config, trained)

    val_by_iter = dict(report.val_losses)
    rows = [[it, loss, val_by_iter.get(it, "")] for it, loss in report.losses]
    if 0 in val_by_iter:
        rows.insert(0, [0, "", val_by_iter[0]])
    write_csv(args.out + ".train.csv", ["iteration", "train_loss", "val_loss"], rows,
              _provenance(args, cfg, {
                  "dataset_sha256": file_sha256(args.data),
                  "stop_reason": report.stop_reason,
                  "final_iteration": report.final_iteration,
                  "best_iteration": report.best_iteration,
              }))
    series = {"train": [(it, loss) for it, loss in report.losses]}
    if report.val_losses:
        series["validation"] = report.val_losses
    svg_line_chart(args.out + ".loss.svg", series, title="cross-entropy loss")
    print(f"stopped by {report.stop_reason} at iteration {report.final_iteration} "
          f"(best validation at {report.best_iteration}); wall time {report.wall_time:.1f} s")
    print(f"checkpoint written to {args.out}")
    return 0


def _check_model_fits_dataset(net_config, dataset):
    if (net_config.image_rows, net_config.image_cols) != (dataset.rows, dataset.cols):
        raise ValueError(f"model expects {net_config.image_rows}x{net_config.image_cols} "
                         f"images, dataset stores {dataset.rows}x{dataset.cols}")
    if net_config.seq_len != dataset.seq_len:
        raise ValueError(f"model expects {net_config.seq_len}-frame windows, "
                         f"dataset stores {dataset.seq_len}")
    for cam in net_config.cameras:
        if cam not in dataset.cameras:
            raise ValueError(f"dataset lacks camera {cam!r} required by the model")


def cmd_eval(args):
    cfg = cfgmod.load_config(args.config, args.overrides)
    net_config, params = load_checkpoint(args.model)
    dataset, _trainset, _valset, testset = _load_split(cfg, args.data)
    _check_model_fits_dataset(net_config, dataset)
    if not testset:
        raise ValueError("test split is empty; adjust data.split")
    _preds, counts = evaluate(params, net_config, testset, threshold=cfg.eval.threshold)
    acc = accuracy_of(counts)
    mcc = mcc_of(counts)
    rows = [[counts.tp, counts.tn, counts.fp, counts.fn, acc, mcc]]
    if args.out:
        write_csv(args.out, ["tp", "tn", "fp", "fn", "accuracy", "mcc"], rows,
                  _provenance(args, cfg, {"dataset_sha256": file_sha256(args.data),
                                          "model": os.path.basename(args.model)}))
    print(f"test samples: {counts.total}  accuracy: {acc:.4f}  mcc: {mcc:.4f}  "
          f"(tp={counts.tp} tn={counts.tn} fp={counts.fp} fn={counts.fn})")
    return 0


def _experiment_groups(cfg, sweep):
    if sweep == "input_mode":
        return [(mode, cfgmod.network_config(cfg, input_mode=mode)) for mode in INPUT_MODE_SWEEP]
    return [(name, cfgmod.network_config(cfg, input_mode="images_only", cameras=cams))
            for name, cams in CAMERA_SWEEP]


def cmd_experiment(args):
    cfg = cfgmod.load_config(args.config, args.overrides)
    dataset = datamod.deserialize_dataset(args.data)
    fold_unit = args.fold_unit or cfg.eval.fold_unit
    meta_path = args.data + ".meta.csv"
    if os.path.exists(meta_path):
        episode_ids, _scenarios = datamod.read_meta(meta_path)
        if len(episode_ids) != len(dataset.samples):
            raise ValueError(f"meta file {meta_path} covers {len(episode_ids)} samples, "
                             f"dataset has {len(dataset.samples)}")
        for s, eid in zip(dataset.samples, episode_ids):
            s.episode_id = int(eid)
    elif fold_unit == "episodes":
        raise ValueError(
            f"episode-level folding needs the sidecar {meta_path}; "
            f"regenerate the dataset or pass --fold-unit samples")
    groups = _experiment_groups(cfg, args.sweep)
    for _name, net_config in groups:
        _check_model_fits_dataset(net_config, dataset)

    os.makedirs(args.out, exist_ok=True)
    tc = cfgmod.train_config(cfg, rng_seed=mix64(args.seed, 2))
    spec = cfgmod.dropout_spec(cfg)
    fold_seed = mix64(args.seed, 3)

    fold_rows = []
    summary_rows = []
    results = {}
    for group, net_config in groups:
        result = run_kfold(dataset.samples, cfg.eval.fold_k, net_config, tc, spec,
                           fold_unit=fold_unit, val_fraction=cfg.eval.val_fraction,
                           rng_seed=fold_seed, jobs=args.jobs)
        results[group] = result
        for f in result.folds:
            fold_rows.append([group, f.fold, f.accuracy, f.mcc])
        summary_rows.append([group, "accuracy", result.accuracy_mean, result.accuracy_std])
        summary_rows.append([group, "mcc", result.mcc_mean, result.mcc_std])
        print(f"{group}: accuracy {result.accuracy_mean:.4f} +/- {result.accuracy_std:.4f}  "
              f"mcc {result.mcc_mean:.4f} +/- {result.mcc_std:.4f}")

    anova_rows = []
    for metric, pick in (("accuracy", lambda r: r.accuracies), ("mcc", lambda r: r.mccs)):
        res = anova_oneway({g: pick(r) for g, r in results.items()})
        anova_rows.append([metric, res.f_value, res.p_value,
                           res.df_between, res.df_within, res.degenerate])
        print(f"ANOVA {metric}: F={res.f_value:.4f} p={res.p_value:.6f} "
              f"df=({res.df_between},{res.df_within})")

    prov = _provenance(args, cfg, {"dataset_sha256": file_sha256(args.data),
                                   "sweep": args.sweep, "fold_unit": fold_unit,
                                   "folds": cfg.eval.fold_k})
    write_csv(os.path.join(args.out, "folds.csv"),
              ["group", "fold", "accuracy", "mcc"], fold_rows, prov)
    write_csv(os.path.join(args.out, "summary.csv"),
              ["group", "metric", "mean", "std"], summary_rows, prov)
    write_csv(os.path.join(args.out, "anova.csv"),
              ["metric", "f_value", "p_value", "df_between", "df_within", "degenerate"],
              anova_rows, prov)
    svg_bar_chart(os.path.join(args.out, "mcc_means.svg"),
                  list(results), [results[g].mcc_mean for g in results],
                  title=f"mean MCC by {args.sweep}")
    return 0


def cmd_predict(args):
    cfg = cfgmod.load_config(args.config, args.overrides)
    net_config, params = load_checkpoint(args.model)
    dataset = datamod.deserialize_dataset(args.data)
    _check_model_fits_dataset(net_config, dataset)
    if not (0 <= args.index < len(dataset.samples)):
        raise ValueError(f"sample index {args.index} out of range "
                         f"[0, {len(dataset.samples)})")
    sample = dataset.samples[args.index]
    n = args.sfp if args.sfp is not None else cfg.eval.sfp_passes
    spec = cfgmod.dropout_spec(cfg)
    dist = run_sfp(params, net_config, sample, spec, n, rng_seed=args.seed)

    os.makedirs(args.out, exist_ok=True)
    prov = _provenance(args, cfg, {"dataset_sha256": file_sha256(args.data),
                                   "model": os.path.basename(args.model),
                                   "sample_index": args.index, "passes": n})
    write_csv(os.path.join(args.out, "distribution.csv"),
              ["pass_index", "p_collision"],
              [[i, p] for i, p in enumerate(dist.samples)], prov)
    counts = histogram(dist, cfg.eval.bins)
    hist_rows = [[i / cfg.eval.bins, (i + 1) / cfg.eval.bins, int(c)]
                 for i, c in enumerate(counts)]
    write_csv(os.path.join(args.out, "histogram.csv"),
              ["bin_lo", "bin_hi", "count"], hist_rows, prov)
    if dist.n >= 2:
        fit = fit_gaussian(dist)
    else:
        from .stats import GaussianFit
        fit = GaussianFit(float(dist.samples[0]), 0.0)
    thresholds = cfgmod.uncertainty_thresholds(cfg)
    if dist.n >= thresholds.min_samples:
        klass = classify_uncertainty(dist, thresholds).value
    else:
        klass = "insufficient_samples"
    write_csv(os.path.join(args.out, "stats.csv"),
              ["mean", "variance", "std", "class"],
              [[fit.mean, fit.variance, fit.std, klass]], prov)
    svg_bar_chart(os.path.join(args.out, "histogram.svg"),
                  [f"{i / cfg.eval.bins:.2f}" for i in range(cfg.eval.bins)],
                  [int(c) for c in counts],
                  title=f"{dist.n} stochastic passes, sample {args.index} "
                        f"(label {sample.label})")
    print(f"sample {args.index} (label {sample.label}): mean p(collision) {fit.mean:.4f}, "
          f"std {fit.std:.4f}, class {klass}")
    return 0


def cmd_anova(args):
    cfg = cfgmod.load_config(args.config, args.overrides)
    _prov, header, rows = read_csv(args.folds)
    if header[:2] != ["group", "value"]:
        raise ValueError(f"expected CSV columns group,value in {args.folds}, got {header}")
    groups = {}
    for row in rows:
        groups.setdefault(row[0], []).append(float(row[1]))
    out_rows = []
    for name, values in groups.items():
        mean, std = mean_std(values)
        out_rows.append(["group", name, len(values), mean, std, "", "", "", "", ""])
        print(f"{name}: n={len(values)} mean={mean:.4f} std={std:.4f}")
    if len(groups) >= 2 and all(len(v) >= 2 for v in groups.values()):
        res = anova_oneway(groups)
        out_rows.append(["anova", "", "", "", "", res.f_value, res.p_value,
                         res.df_between, res.df_within, res.degenerate])
        print(f"ANOVA: F={res.f_value:.4f} p={res.p_value:.6f} "
              f"df=({res.df_between},{res.df_within})")
    if args.out:
        write_csv(args.out,
                  ["row_type", "group", "n", "mean", "std",
                   "f_value", "p_value", "df_between", "df_within", "degenerate"],
                  out_rows, _provenance(args, cfg))
    return 0


def cmd_inspect(args):
    cfg = cfgmod.load_config(args.config, args.overrides)
    dataset = datamod.deserialize_dataset(args.data)
    labels = np.array([s.label for s in dataset.samples])
    rows = [["all", len(labels), int(labels.sum()), int((1 - labels).sum())]]
    meta_path = args.data + ".meta.csv"
    if os.path.exists(meta_path):
        _eids, scenarios = datamod.read_meta(meta_path)
        if len(scenarios) == len(labels):
            for sid in sorted(set(scenarios.tolist())):
                pick = scenarios == sid
                rows.append([f"scenario_{sid}", int(pick.sum()),
                             int(labels[pick].sum()), int((pick & (labels == 0)).sum())])
    for row in rows:
        print(f"{row[0]}: samples={row[1]} collision={row[2]} no_collision={row[3]}")
    if args.out:
        write_csv(args.out, ["subset", "samples", "collision", "no_collision"], rows,
                  _provenance(args, cfg, {"dataset_sha256": file_sha256(args.data)}))
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
    "predict": cmd_predict,
    "anova": cmd_anova,
    "inspect": cmd_inspect,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 1
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Subcommands:

* ``train``   fit a network per the run config and write checkpoint,
              per-epoch record CSV, and run manifest.
* ``eval``    score a checkpoint against the finite-difference reference for
              each configured material; exports probe histories and field
              snapshots.
* ``ablate``  run a named comparison suite (scaling / kappa / optimizer /
              architecture) over the configured seeds and emit mean/std CSVs.
* ``oracle``  run the finite-difference reference by itself and export it.
* ``export``  write artifacts from existing pieces (collocation dump,
              predicted fields, probe histories) without training.

Exit codes: 0 success, 1 configuration error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import config as runcfg
from .autodiff import NonFiniteLoss
from .config import ConfigError
from .model import (Normalizer, init_params, load_params, predict_temperatures,
                    save_params)
from .oracle import (NonFinite, TemperatureField, UnstableStep, fdm_solve,
                     field_to_csv, field_to_vtk, probe, probe_to_csv,
                     relative_l2, _node_count)
from .physics import DegenerateScale, resolve_material
from .sampling import build_collocation, dump_collocation, get_profile
from .train import train

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2

_NUMERIC_ERRORS = (NonFiniteLoss, UnstableStep, NonFinite, DegenerateScale)


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as config errors (exit 1)."""

    def error(self, message):
        raise ConfigError(message)


# ---- config plumbing ---------------------------------------------------------

def _resolve_config(args):
    cfg = runcfg.load(args.config) if args.config else runcfg.loads("")
    if getattr(args, "profile", None):
        runcfg.apply_profile(cfg, args.profile)
    if getattr(args, "scaling", None):
        cfg["network"]["scaling"] = args.scaling.replace("-", "_")
    if getattr(args, "set", None):
        runcfg.apply_overrides(cfg, args.set)
    if getattr(args, "seed", None) is not None:
        cfg["sampling"]["seed"] = args.seed
    runcfg.validate(cfg)
    return cfg


def _prepare_out(cfg, args, default_name):
    out = runcfg.resolve_output_dir(cfg, getattr(args, "out", None), default_name)
    os.makedirs(out, exist_ok=True)
    runcfg.write_manifest(cfg, runcfg.manifest_name(out))
    return out


def _build_problem(cfg):
    process = runcfg.process_config(cfg)
    space = runcfg.material_space(cfg)
    return process, space, Normalizer.for_problem(process, space)


def _init_net(cfg):
    net_cfg = cfg["network"]
    return init_params(net_cfg["architecture"], seed=cfg["sampling"]["seed"],
                       fusion=net_cfg["fusion"],
                       with_scale_aux=net_cfg["scaling"] == "learned_tmax")


def _materials(cfg, args):
    names = getattr(args, "material", None) or cfg["evaluation"]["materials"]
    return [(name, resolve_material(name).as_array()) for name in names]


def _load_checkpoint(path):
    try:
        return load_params(path)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path!r}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"bad checkpoint {path!r}: {exc}") from exc


def _check_checkpoint(net, cfg):
    net_cfg = cfg["network"]
    wants_aux = net_cfg["scaling"] == "learned_tmax"
    if (net.arch != net_cfg["architecture"] or net.fusion != net_cfg["fusion"]
            or net.has_scale_aux != wants_aux):
        raise ConfigError(
            f"checkpoint ({net.arch}/{net.fusion}/aux={net.has_scale_aux}) "
            f"does not match config ({net_cfg['architecture']}/"
            f"{net_cfg['fusion']}/aux={wants_aux})")


def _predictor(net, lam, scaling, process, norm):
    return lambda pts: predict_temperatures(net, pts, lam, scaling, process, norm)


def _safe_tag(name):
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


def _oracle_fields(process, lam, spacing, cache_dir, tag):
    """Reference snapshots every 0.1 s, cached per material in the run
    directory so repeated evaluations reuse one solve."""
    os.makedirs(cache_dir, exist_ok=True)
    path = os.path.join(cache_dir, f"{_safe_tag(tag)}.npz")
    if os.path.exists(path):
        data = np.load(path)
        spacing_t = tuple(data["spacing"])
        return [TemperatureField(values=v, spacing=spacing_t,
                                 time=float(t), lam=tuple(data["lam"]),
                                 process=process)
                for v, t in zip(data["values"], data["times"])]
    fields = fdm_solve(process, lam, spacing=spacing)
    np.savez(path,
             values=np.stack([f.values for f in fields]),
             times=np.array([f.time for f in fields]),
             spacing=np.array(fields[0].spacing),
             lam=np.asarray(lam, dtype=np.float64))
    return fields


def _prediction_field(net, lam, scaling, process, norm, spacing, t):
    nx = _node_count(process.extent[0], spacing)
    ny = _node_count(process.extent[1], spacing)
    nz = _node_count(process.extent[2], spacing)
    field = TemperatureField(values=np.zeros((nx, ny, nz)),
                             spacing=(spacing, spacing, spacing),
                             time=float(t), lam=tuple(np.asarray(lam)),
                             process=process)
    pts = field.node_points()
    field.values[...] = predict_temperatures(
        net, pts, lam, scaling, process, norm).reshape(nx, ny, nz)
    return field


def _export_field(field, out, stem):
    field_to_csv(field, os.path.join(out, stem + ".csv"))
    field_to_vtk(field, os.path.join(out, stem + ".vtk"))


# ---- train ---------------------------------------------------------------------

def _run_training(cfg, out):
    """Shared by cmd_train and the ablation runner; returns (net, records)."""
    process, space, norm = _build_problem(cfg)
    scaling = runcfg.scaling_config(cfg)
    colloc = build_collocation(process, get_profile(cfg["sampling"]["profile"]))
    net = _init_net(cfg)
    adam_batch, lbfgs_batch = runcfg.batch_specs(cfg)
    net, records = train(
        net, colloc, space, process, norm, scaling,
        weights=runcfg.loss_weights(cfg),
        opt=runcfg.optimizer_config(cfg),
        adam_batch=adam_batch, lbfgs_batch=lbfgs_batch,
        seed=cfg["sampling"]["seed"],
        fixed_lam=runcfg.fixed_material(cfg),
        record_path=os.path.join(out, "train_record.csv"),
        checkpoint_path=os.path.join(out, "params.ckpt"),
        checkpoint_every=cfg["output"]["checkpoint_every"])
    save_params(net, os.path.join(out, "params.ckpt"))
    return net, records


def cmd_train(args):
    cfg = _resolve_config(args)
    out = _prepare_out(cfg, args, f"train_seed{cfg['sampling']['seed']}")
    started = time.perf_counter()
    net, records = _run_training(cfg, out)
    elapsed = time.perf_counter() - started
    last = records[-1]
    print(f"trained {net.arch}/{cfg['network']['scaling']} "
          f"seed={cfg['sampling']['seed']} epochs={last.epoch + 1} "
          f"loss_total={last.loss_total:.6e} ({elapsed:.1f} s)")
    print(f"artifacts in {out}")
    return EXIT_OK


# ---- eval ----------------------------------------------------------------------

def _eval_checkpoint(net, cfg, out, materials):
    process, space, norm = _build_problem(cfg)
    scaling = runcfg.scaling_config(cfg)
    ev = cfg["evaluation"]
    rows = []
    for name, lam in materials:
        fields = _oracle_fields(process, lam, ev["oracle_spacing"],
                                os.path.join(out, "oracle_cache"), name)
        pred = _predictor(net, lam, scaling, process, norm)
        err = relative_l2(pred, fields)
        ood = not bool(space.contains(lam))
        times = np.array([f.time for f in fields])
        probes = []
        for i, loc in enumerate(ev["probes"]):
            ref_hist = probe(fields, loc)
            pred_hist = probe(pred, loc, times=times)
            tag = f"{_safe_tag(name)}_probe{i}"
            probe_to_csv(ref_hist, os.path.join(out, f"{tag}_oracle.csv"))
            probe_to_csv(pred_hist, os.path.join(out, f"{tag}_pred.csv"))
            probes.append({"location": list(loc),
                           "peak_time_oracle": ref_hist.peak_time(),
                           "peak_time_pred": pred_hist.peak_time()})
        for t in ev["snapshot_times"]:
            stem_t = f"t{t:g}s"
            k = int(np.argmin(np.abs(times - t)))
            _export_field(fields[k], out, f"oracle_{_safe_tag(name)}_{stem_t}")
            pf = _prediction_field(net, lam, scaling, process, norm,
                                   ev["oracle_spacing"], times[k])
            _export_field(pf, out, f"pred_{_safe_tag(name)}_{stem_t}")
        rows.append({"material": name, "ood": ood, "rel_l2_pct": err,
                     "probes": probes})
        print(f"{name}: rel_l2={err:.3f}%{'  [outside training box]' if ood else ''}")
    with open(os.path.join(out, "metrics.json"), "w", encoding="utf-8") as f:
        json.dump(rows, f, indent=2)
        f.write("\n")
    with open(os.path.join(out, "metrics.csv"), "w", encoding="utf-8") as f:
        f.write("material,ood,rel_l2_pct\n")
        for row in rows:
            f.write(f"{row['material']},{int(row['ood'])},"
                    f"{row['rel_l2_pct']:.6f}\n")
    return rows


def cmd_eval(args):
    cfg = _resolve_config(args)
    net = _load_checkpoint(args.checkpoint)
    _check_checkpoint(net, cfg)
    out = _prepare_out(cfg, args, "eval")
    _eval_checkpoint(net, cfg, out, _materials(cfg, args))
    print(f"artifacts in {out}")
    return EXIT_OK


# ---- ablate --------------------------------------------------------------------

# Arm values may reference another resolved config key with "@dotted.key".
ABLATION_SUITES = {
    "scaling": [
        ("raw", {"network.scaling": "raw"}),
        ("softplus_only", {"network.scaling": "softplus_only"}),
        ("fixed_tmax", {"network.scaling": "fixed_tmax"}),
        ("learned_tmax", {"network.scaling": "learned_tmax"}),
        ("physics_guided", {"network.scaling": "physics_guided"}),
    ],
    "kappa": [
        (f"kappa_{v:g}", {"network.kappa": v})
        for v in (1.0, 1.25, 1.5, 1.75, 2.0)
    ],
    "optimizer": [
        ("hybrid", {}),
        ("adam_only", {"optimizer.adam_epochs": "@optimizer.total_epochs"}),
        ("lbfgs_only", {"optimizer.adam_epochs": 0}),
    ],
    "architecture": [
        ("decoupled", {"network.architecture": "decoupled"}),
        ("monolithic", {"network.architecture": "ppinn"}),
    ],
}


def _arm_config(base, overrides, seed):
    cfg = json.loads(runcfg.dumps(base))
    for dotted, value in overrides.items():
        if isinstance(value, str) and value.startswith("@"):
            ref_node, ref_leaf = runcfg._walk(cfg, value[1:])
            value = ref_node[ref_leaf]
        node, leaf = runcfg._walk(cfg, dotted)
        node[leaf] = value
    cfg["sampling"]["seed"] = seed
    runcfg.validate(cfg)
    return cfg


def _mean_std(values):
    vals = [v for v in values if np.isfinite(v)]
    if not vals:
        return float("nan"), float("nan")
    if len(vals) == 1:
        return float(vals[0]), 0.0
    return float(np.mean(vals)), float(np.std(vals, ddof=1))


def cmd_ablate(args):
    base = _resolve_config(args)
    suite = args.suite
    if suite not in ABLATION_SUITES:
        raise ConfigError(f"unknown suite {suite!r}; expected one of "
                          f"{tuple(ABLATION_SUITES)}")
    out = _prepare_out(base, args, f"ablate_{suite}")
    materials = _materials(base, args)
    seeds = base["sampling"]["ablation_seeds"]
    runs = []
    for arm, overrides in ABLATION_SUITES[suite]:
        for seed in seeds:
            cfg = _arm_config(base, overrides, seed)
            arm_out = os.path.join(out, arm, f"seed{seed}")
            os.makedirs(arm_out, exist_ok=True)
            runcfg.write_manifest(cfg, runcfg.manifest_name(arm_out))
            try:
                net, records = _run_training(cfg, arm_out)
                rows = _eval_checkpoint(net, cfg, arm_out, materials)
                rel = float(np.mean([r["rel_l2_pct"] for r in rows]))
                final = records[-1].loss_total
                runs.append((arm, seed, rel, final, "ok"))
                print(f"[{suite}/{arm} seed {seed}] rel_l2={rel:.3f}% "
                      f"final_loss={final:.6e}")
            except _NUMERIC_ERRORS as exc:
                runs.append((arm, seed, float("nan"), float("nan"), "failed"))
                print(f"[{suite}/{arm} seed {seed}] failed: {exc}",
                      file=sys.stderr)
    with open(os.path.join(out, "runs.csv"), "w", encoding="utf-8") as f:
        f.write("arm,seed,rel_l2_pct,final_loss,status\n")
        for arm, seed, rel, final, status in runs:
            f.write(f"{arm},{seed},{rel:.6f},{final:.17g},{status}\n")
    with open(os.path.join(out, "suite.csv"), "w", encoding="utf-8") as f:
        f.write("arm,n_ok,rel_l2_mean,rel_l2_std,final_loss_mean,"
                "final_loss_std\n")
        for arm, _ in ABLATION_SUITES[suite]:
            rels = [r[2] for r in runs if r[0] == arm and r[4] == "ok"]
            finals = [r[3] for r in runs if r[0] == arm and r[4] == "ok"]
            rm, rs = _mean_std(rels)
            fm, fs = _mean_std(finals)
            f.write(f"{arm},{len(rels)},{rm:.6f},{rs:.6f},{fm:.17g},"
                    f"{fs:.17g}\n")
    print(f"suite summary in {os.path.join(out, 'suite.csv')}")
    return EXIT_OK


# ---- oracle --------------------------------------------------------------------

def cmd_oracle(args):
    cfg = _resolve_config(args)
    out = _prepare_out(cfg, args, "oracle")
    process, _, _ = _build_problem(cfg)
    ev = cfg["evaluation"]
    for name, lam in _materials(cfg, args):
        fields = fdm_solve(process, lam, spacing=ev["oracle_spacing"])
        times = np.array([f.time for f in fields])
        for t in ev["snapshot_times"]:
            k = int(np.argmin(np.abs(times - t)))
            _export_field(fields[k], out,
                          f"oracle_{_safe_tag(name)}_t{t:g}s")
        for i, loc in enumerate(ev["probes"]):
            probe_to_csv(probe(fields, loc),
                         os.path.join(out, f"oracle_{_safe_tag(name)}_probe{i}.csv"))
        peak = max(float(f.values.max()) for f in fields)
        print(f"{name}: {len(fields)} snapshots, peak {peak:.1f} K")
    print(f"artifacts in {out}")
    return EXIT_OK


# ---- export --------------------------------------------------------------------

def cmd_export(args):
    cfg = _resolve_config(args)
    out = _prepare_out(cfg, args, f"export_{args.kind}")
    if args.kind == "collocation":
        process, _, _ = _build_problem(cfg)
        colloc = build_collocation(process,
                                   get_profile(cfg["sampling"]["profile"]))
        path = os.path.join(out, "collocation.bin")
        dump_collocation(colloc, path)
        print(f"{colloc.total} points (pde={colloc.n_pde} bc={colloc.n_bc} "
              f"ic={colloc.n_ic}) -> {path}")
        return EXIT_OK
    if not args.checkpoint:
        raise ConfigError(f"export --kind {args.kind} needs --checkpoint")
    net = _load_checkpoint(args.checkpoint)
    _check_checkpoint(net, cfg)
    process, _, norm = _build_problem(cfg)
    scaling = runcfg.scaling_config(cfg)
    ev = cfg["evaluation"]
    for name, lam in _materials(cfg, args):
        if args.kind == "fields":
            for t in ev["snapshot_times"]:
                pf = _prediction_field(net, lam, scaling, process, norm,
                                       ev["oracle_spacing"], t)
                _export_field(pf, out, f"pred_{_safe_tag(name)}_t{t:g}s")
        else:
            times = np.arange(0.0, process.t_end + 1e-12, 0.1)
            pred = _predictor(net, lam, scaling, process, norm)
            for i, loc in enumerate(ev["probes"]):
                probe_to_csv(probe(pred, loc, times=times),
                             os.path.join(out,
                                          f"pred_{_safe_tag(name)}_probe{i}.csv"))
    print(f"artifacts in {out}")
    return EXIT_OK


# ---- parser --------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="JSON run config; defaults apply when omitted")
    p.add_argument("--seed", type=int, help="override sampling.seed")
    p.add_argument("--profile", choices=runcfg.PROFILES,
                   help="apply a collocation/schedule profile override set")
    p.add_argument("--out", help="output directory (overrides config and "
                   f"${runcfg.ENV_OUTPUT_ROOT})")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                   help="dotted config override, e.g. optimizer.lr_adam=1e-3")


def build_parser():
    parser = _Parser(prog="plateheat",
                     description="Parametric thermal-field surrogate for "
                                 "laser powder bed fusion bare plates")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="fit a network per the run config")
    _add_common(p_train)
    p_train.add_argument("--scaling",
                         help="output scaling mode shorthand "
                              "(e.g. softplus-only, physics-guided)")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="score a checkpoint against the "
                                         "finite-difference reference")
    _add_common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--material", action="append",
                        help="alloy name (repeatable); default from config")
    p_eval.set_defaults(func=cmd_eval)

    p_abl = sub.add_parser("ablate", help="run a comparison suite")
    p_abl.add_argument("suite", choices=sorted(ABLATION_SUITES))
    _add_common(p_abl)
    p_abl.add_argument("--material", action="append")
    p_abl.set_defaults(func=cmd_ablate)

    p_orc = sub.add_parser("oracle", help="run and export the reference solver")
    _add_common(p_orc)
    p_orc.add_argument("--material", action="append")
    p_orc.set_defaults(func=cmd_oracle)

    p_exp = sub.add_parser("export", help="write artifacts without training")
    _add_common(p_exp)
    p_exp.add_argument("--kind", choices=("collocation", "fields", "probes"),
                       required=True)
    p_exp.add_argument("--checkpoint")
    p_exp.add_argument("--material", action="append")
    p_exp.set_defaults(func=cmd_export)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()

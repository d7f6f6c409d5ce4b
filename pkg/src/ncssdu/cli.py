"""``ncssdu`` command line: simulation, baselines, training, inference and fMRI analysis.

Every subcommand reads and writes datastores (see :mod:`ncssdu.datastore`)
and accepts ``--seed`` and ``--config <json>``. A config file overrides the
defaults in :data:`DEFAULTS`; command-line flags override the config.
"""
import argparse
import json
import logging
import math
import os
import sys

import numpy as np

from . import acquisition as acq
from . import bold as boldmod
from . import datastore, dcf, report, solvers, ssdu
from .acquisition import CoilMaps
from .errors import MissingArrayError, NcssduError
from .model import ModelParams
from .operators import SenseOperator, estimate_coil_maps
from .training import Reconstructor, Sample, TrainConfig, train
from . import nufft

log = logging.getLogger("ncssdu")

DEFAULTS = {
    "grid": [64, 64],
    "coils": 8,
    "tes": [3.35, 15.63, 27.91],
    "arms": 10,
    "keep_arms": [0],
    "fov_factor": 1.2,
    "snr": 20.0,
    "phantom_seed": None,
    "calib_radius": math.pi / 4,
    "cg_iterations": 10,
    "lambda": None,
    "epochs": 100,
    "learning_rate": 5e-4,
    "mask_count": 7,
    "theta_fraction": 0.6,
    "center_retained": 32,
    "optimizer": "adam",
    "unroll_count": 10,
    "df_iterations": 15,
    "depth": 5,
    "width": 32,
    "mu_init": 0.05,
    "volumes": 174,
    "tr": 1.488,
    "cnr": 1.0,
    "block_on": 20.0,
    "block_off": 20.0,
    "blocks": 6,
}


class CliError(Exception):
    pass


def load_config(path):
    cfg = dict(DEFAULTS)
    if path:
        with open(path, encoding="utf-8") as f:
            user = json.load(f)
        unknown = set(user) - set(DEFAULTS)
        if unknown:
            raise CliError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update(user)
    return cfg


def _write(path, arrays, args, cfg, kind):
    prov = {
        "seed": args.seed,
        "config_hash": datastore.config_hash(cfg),
        "command": kind,
    }
    datastore.save(path, arrays, prov)
    datastore.load(path)  # verify every checksum before reporting success
    log.info("wrote %s (%s)", path, ", ".join(sorted(arrays)))


def _need(path, names):
    return datastore.load(path, names)[0]


def _trajectories(store):
    a = _need(store, ["traj", "arms_kept", "fov_x1000"])
    rows, cols, arms = (int(v) for v in a["traj"])
    full = acq.default_spiral((rows, cols), arms, int(a["fov_x1000"][0]) / 1000.0)
    return full, acq.subsample_arms(full, [int(i) for i in a["arms_kept"]])


def _maps(store, name="maps"):
    a = _need(store, [name, "support"])
    return CoilMaps(a[name].astype(np.complex128), a["support"].astype(bool))


def _kspace(store, rate):
    name = "kspace_r1" if rate == 1 else "kspace"
    return _need(store, [name])[name].astype(np.complex128)


def _traj_for(store, rate):
    full, sub = _trajectories(store)
    return full if rate == 1 else sub


# -- subcommands -----------------------------------------------------------

def cmd_simulate(args, cfg):
    grid = tuple(cfg["grid"])
    sched = acq.EchoSchedule(tuple(cfg["tes"]))
    pseed = args.seed if cfg["phantom_seed"] is None else cfg["phantom_seed"]
    ph = acq.make_phantom(grid, pseed)
    full = acq.default_spiral(grid, cfg["arms"], cfg["fov_factor"])
    sub = acq.subsample_arms(full, cfg["keep_arms"])
    true_maps = acq.simulate_coils(grid, cfg["coils"])
    truth = acq.phantom_echo_images(ph, sched)
    w_full = dcf.pipe_menon(full.coords, grid)
    sd = acq.noise_sd_for_snr(cfg["snr"], ph, sched, w_full) if cfg["snr"] else 0.0
    y = acq.simulate_kspace(truth, true_maps, full, sd, args.seed)
    maps = estimate_coil_maps(y, full, cfg["calib_radius"], weights=w_full)
    arrays = {
        "truth": truth,
        "kspace_r1": y,
        "kspace": _select(y, full, cfg),
        "maps": maps.maps,
        "maps_true": true_maps.maps,
        "support": maps.support.astype(np.int32),
        "m0": ph.m0,
        "t2star": ph.t2star,
        "visual": ph.labels["visual"].astype(np.int32),
        "tes": np.asarray(sched.tes),
        "traj": np.array([grid[0], grid[1], cfg["arms"]], dtype=np.int32),
        "arms_kept": np.asarray(cfg["keep_arms"], dtype=np.int32),
        "fov_x1000": np.array([round(cfg["fov_factor"] * 1000)], dtype=np.int32),
        "noise_sd": np.array([sd]),
    }
    _write(args.out, arrays, args, cfg, "simulate")


def _select(y, full, cfg):
    n = full.samples_per_arm
    return np.concatenate([y[..., i * n:(i + 1) * n] for i in cfg["keep_arms"]], axis=-1)


def cmd_dcf(args, cfg):
    traj = _traj_for(args.input, args.rate)
    if args.masks:
        part = "theta" if args.part == "theta" else "lambda"
        idx = _need(args.masks, [f"{part}_{args.mask}"])[f"{part}_{args.mask}"].astype(np.int64)
        w = dcf.weights_for_subset(traj, idx)
    else:
        idx = np.arange(traj.n_samples)
        w = dcf.pipe_menon(traj.coords, traj.grid)
    _write(args.out, {"w": w.w, "indices": idx.astype(np.int32),
                      "clamped": np.array([int(w.clamped)], dtype=np.int32)}, args, cfg, "dcf")


def _operator(store, rate):
    traj = _traj_for(store, rate)
    maps = _maps(store)
    w = dcf.pipe_menon(traj.coords, traj.grid)
    return SenseOperator(nufft.plan(traj.grid, traj.coords), maps, w)


def cmd_recon_grid(args, cfg):
    op = _operator(args.input, args.rate)
    recon = solvers.gridding_recon(op, _kspace(args.input, args.rate))
    _write(args.out, {"recon": recon}, args, cfg, "recon-grid")


def cmd_recon_cgsense(args, cfg):
    op = _operator(args.input, args.rate)
    iters = args.iterations or cfg["cg_iterations"]
    recon, rep = solvers.cg_sense(op, _kspace(args.input, args.rate), iters, cfg["lambda"])
    _write(args.out, {"recon": recon, "residuals": np.asarray(rep.residual_history)},
           args, cfg, "recon-cgsense")


def cmd_masks(args, cfg):
    omega = _traj_for(args.input, 10).n_samples
    ms = ssdu.make_masks(omega, cfg["mask_count"], cfg["theta_fraction"], cfg["center_retained"],
                         args.seed)
    arrays = {"omega_size": np.array([omega], dtype=np.int32),
              "center_retained": np.array([ms.center_retained], dtype=np.int32)}
    for j, (th, la) in enumerate(ms.masks):
        arrays[f"theta_{j}"] = th.astype(np.int32)
        arrays[f"lambda_{j}"] = la.astype(np.int32)
    _write(args.out, arrays, args, cfg, "masks")


def _load_masks(path, cfg):
    arrays, manifest = datastore.load(path)
    count = sum(1 for k in arrays if k.startswith("theta_"))
    if count == 0:
        raise MissingArrayError(f"datastore {path} lacks array(s): theta_0")
    masks = tuple((arrays[f"theta_{j}"].astype(np.int64), arrays[f"lambda_{j}"].astype(np.int64))
                  for j in range(count))
    return ssdu.SsduMaskSet(int(arrays["omega_size"][0]), masks,
                            int(arrays["center_retained"][0]), cfg["theta_fraction"],
                            manifest["provenance"].get("seed") or 0)


def _train_config(cfg, seed, epochs=None):
    return TrainConfig(
        learning_rate=cfg["learning_rate"], epochs=cfg["epochs"] if epochs is None else epochs,
        mask_count=cfg["mask_count"], theta_fraction=cfg["theta_fraction"],
        center_retained=cfg["center_retained"], seed=seed, optimizer=cfg["optimizer"],
        unroll_count=cfg["unroll_count"], cg_iterations=cfg["df_iterations"], depth=cfg["depth"],
        width=cfg["width"], mu_init=cfg["mu_init"],
    )


def cmd_train_ssdu(args, cfg):
    dataset = [Sample(_kspace(s, 10), _traj_for(s, 10), _maps(s)) for s in args.input]
    masks = None
    if args.masks:
        if len(args.masks) != len(args.input):
            raise CliError("give one --masks store per --in store")
        masks = [_load_masks(m, cfg) for m in args.masks]
    tcfg = _train_config(cfg, args.seed, args.epochs)
    os.makedirs(args.out, exist_ok=True)
    ckpt_dir = os.path.join(args.out, "checkpoints")

    def on_epoch(epoch, params, history):
        _write(os.path.join(ckpt_dir, f"epoch-{epoch + 1:04d}"), params.to_arrays(), args, cfg,
               "train-ssdu")
        with open(os.path.join(args.out, "loss.tsv"), "w", encoding="utf-8") as f:
            f.write("epoch\tloss\n")
            for e, v in enumerate(history):
                f.write(f"{e + 1}\t{v:.9g}\n")

    import torch
    torch.use_deterministic_algorithms(True)
    params, history = train(dataset, tcfg, cache_dir=os.path.join(args.out, "cache"),
                            on_epoch=on_epoch, masks=masks)
    arrays = params.to_arrays()
    arrays["loss_history"] = np.asarray(history)
    arrays["unroll_config"] = np.array([tcfg.unroll_count, tcfg.cg_iterations], dtype=np.int32)
    _write(args.out, arrays, args, cfg, "train-ssdu")


def _load_model(path):
    arrays, _ = datastore.load(path)
    if "conv0.weight" not in arrays:
        raise MissingArrayError(f"datastore {path} lacks array(s): conv0.weight")
    unrolls, cg = (int(v) for v in arrays.get("unroll_config", np.array([10, 15])))
    params = {k: v for k, v in arrays.items() if k.startswith("conv") or k == "mu_log"}
    return ModelParams.from_arrays(params, unrolls, cg)


def cmd_recon_pddl(args, cfg):
    params = _load_model(args.model)
    traj = _traj_for(args.input, args.rate)
    rec = Reconstructor(params, traj, _maps(args.input))
    _write(args.out, {"recon": rec(_kspace(args.input, args.rate))}, args, cfg, "recon-pddl")


def cmd_fmri_sim(args, cfg):
    grid = tuple(cfg["grid"])
    sched = acq.EchoSchedule(tuple(cfg["tes"]))
    pseed = args.seed if cfg["phantom_seed"] is None else cfg["phantom_seed"]
    ph = acq.make_phantom(grid, pseed)
    full = acq.default_spiral(grid, cfg["arms"], cfg["fov_factor"])
    sub = acq.subsample_arms(full, cfg["keep_arms"])
    true_maps = acq.simulate_coils(grid, cfg["coils"])
    w_full = dcf.pipe_menon(full.coords, grid)
    sd = acq.noise_sd_for_snr(cfg["snr"], ph, sched, w_full) if cfg["snr"] else 0.0
    # coil maps come from a fully sampled baseline scan, as for a real session
    base = acq.simulate_kspace(acq.phantom_echo_images(ph, sched), true_maps, full, sd, args.seed)
    maps = estimate_coil_maps(base, full, cfg["calib_radius"], weights=w_full)
    image_sd = sd * float(np.linalg.norm(w_full.w))
    paradigm = {"block_on_seconds": cfg["block_on"], "block_off_seconds": cfg["block_off"],
                "n_blocks": cfg["blocks"]}
    sim = boldmod.simulate_fmri(ph, sched, true_maps, sub, cfg["volumes"], cfg["tr"], cfg["cnr"],
                                sd, image_sd, seed=args.seed + 1, paradigm=paradigm)
    arrays = {
        "kspace_series": sim.kspace,
        "activation": sim.mask.astype(np.int32),
        "design": sim.design.columns,
        "t2star": ph.t2star,
        "maps": maps.maps,
        "support": maps.support.astype(np.int32),
        "tes": np.asarray(sched.tes),
        "tr": np.array([cfg["tr"]]),
        "traj": np.array([grid[0], grid[1], cfg["arms"]], dtype=np.int32),
        "arms_kept": np.asarray(cfg["keep_arms"], dtype=np.int32),
        "fov_x1000": np.array([round(cfg["fov_factor"] * 1000)], dtype=np.int32),
        "delta_r2star": np.array([sim.delta_r2star]),
    }
    _write(args.out, arrays, args, cfg, "fmri-sim")


def cmd_bold(args, cfg):
    a = _need(args.input, ["kspace_series", "design", "t2star", "tr", "tes", "activation"])
    traj = _traj_for(args.input, 10)
    maps = _maps(args.input)
    series = a["kspace_series"].astype(np.complex128)
    if args.method == "pddl":
        if not args.model:
            raise CliError("--method pddl needs --model")
        recon = Reconstructor(_load_model(args.model), traj, maps)
    elif args.method == "grid":
        op = SenseOperator(nufft.plan(traj.grid, traj.coords), maps,
                           dcf.pipe_menon(traj.coords, traj.grid))
        recon = lambda y: solvers.gridding_recon(op, y)
    else:
        raise CliError(f"unknown method {args.method!r}")
    frames = np.stack([np.abs(recon(y)) for y in series])  # (T, E, H, W)
    tr = float(a["tr"][0])
    echo_series = [boldmod.TimeSeries(frames[:, e], tr) for e in range(frames.shape[1])]
    combined = boldmod.echo_combine(echo_series, tuple(a["tes"]), a["t2star"].astype(np.float64))
    labels = ("task",) + tuple(f"drift{i}" for i in range(a["design"].shape[1] - 1))
    design = boldmod.DesignMatrix(a["design"].astype(np.float64), labels, 0)
    fit = boldmod.glm_fit(combined, design)
    _write(args.out, {"t": fit.t, "beta": fit.beta, "sigma": fit.sigma,
                      "activation": a["activation"], "combined_mean": combined.volumes.mean(axis=0)},
           args, cfg, "bold")


def cmd_report(args, cfg):
    recon = _need(args.input, ["recon"])["recon"]
    ref = _need(args.ref, ["truth"])["truth"] if args.ref else recon
    os.makedirs(args.out, exist_ok=True)
    report.save_png(os.path.join(args.out, "montage.png"), report.montage(recon))
    summary = {"nrmse": report.nrmse(recon, ref), "per_echo_nrmse": report.per_echo_nrmse(recon, ref),
               "t_stats": {}}
    if args.bold:
        b = _need(args.bold, ["t", "activation"])
        summary["t_stats"] = report.t_summary(b["t"], b["activation"].astype(bool))
        report.save_png(os.path.join(args.out, "tmap.png"), report.signed_map(b["t"]))
    with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    print(json.dumps(summary, sort_keys=True))


# -- parser ----------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="ncssdu", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, inputs=True, many=False):
        sp = sub.add_parser(name)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", default=None, help="JSON file overriding the defaults")
        sp.add_argument("--out", required=True)
        if inputs:
            sp.add_argument("--in", dest="input", required=True, nargs="+" if many else None)
        sp.set_defaults(fn=fn)
        return sp

    add("simulate", cmd_simulate, inputs=False)
    sp = add("dcf", cmd_dcf)
    sp.add_argument("--rate", type=int, choices=(1, 10), default=10)
    sp.add_argument("--masks")
    sp.add_argument("--mask", type=int, default=0)
    sp.add_argument("--part", choices=("theta", "lambda"), default="theta")
    for name, fn in (("recon-grid", cmd_recon_grid), ("recon-cgsense", cmd_recon_cgsense)):
        sp = add(name, fn)
        sp.add_argument("--rate", type=int, choices=(1, 10), default=10)
        if name == "recon-cgsense":
            sp.add_argument("--iterations", type=int)
    add("masks", cmd_masks)
    sp = add("train-ssdu", cmd_train_ssdu, many=True)
    sp.add_argument("--masks", nargs="+")
    sp.add_argument("--epochs", type=int)
    sp = add("recon-pddl", cmd_recon_pddl)
    sp.add_argument("--model", required=True)
    sp.add_argument("--rate", type=int, choices=(1, 10), default=10)
    add("fmri-sim", cmd_fmri_sim, inputs=False)
    sp = add("bold", cmd_bold)
    sp.add_argument("--method", choices=("pddl", "grid"), default="pddl")
    sp.add_argument("--model")
    sp = add("report", cmd_report)
    sp.add_argument("--ref")
    sp.add_argument("--bold")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        args.fn(args, cfg)
    except MissingArrayError as e:
        print(f"ncssdu {args.command}: missing input: {e.args[0]}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"ncssdu {args.command}: {e}", file=sys.stderr)
        return 2
    except (CliError, NcssduError, ValueError) as e:
        print(f"ncssdu {args.command}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

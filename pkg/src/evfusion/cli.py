"""Command-line interface: synth, train, eval, predict, profile.

Every command echoes its effective configuration to the run directory
before doing any work, and is deterministic under a fixed --seed.

Exit codes: 0 success, 2 invalid input or configuration, 3 runtime
numerical failure, 4 I/O failure.
"""

import argparse
import datetime
import os
import sys


def _apply_threads(argv):
    # Thread caps must land in the environment before numpy loads BLAS.
    if "numpy" in sys.modules:
        return
    threads = None
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif a.startswith("--threads="):
            threads = a.split("=", 1)[1]
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)


def build_parser():
    p = argparse.ArgumentParser(prog="evfusion",
                                description="event/frame fusion optical flow")
    p.add_argument("--config", help="key = value config file; flags win over it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=0,
                   help="cap internal parallelism (0 = hardware default)")
    p.add_argument("--force", action="store_true",
                   help="write into the output directory as-is instead of a "
                        "fresh timestamped subdirectory")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("spec", help="scene spec file (key = value)")
    sp.add_argument("out_dir")
    sp.add_argument("--dt", type=int, choices=(1, 4), default=1)

    tp = sub.add_parser("train", help="train a model on a dataset directory")
    tp.add_argument("dataset_dir")
    tp.add_argument("out_dir")
    _model_flags(tp)
    tp.add_argument("--lr0", type=float, default=5e-4)
    tp.add_argument("--epochs", type=int, default=40)
    tp.add_argument("--batch-size", type=int, default=8)
    tp.add_argument("--crop-size", type=int, default=32)
    tp.add_argument("--lambda", dest="smooth_weight", type=float, default=0.0003)
    tp.add_argument("--checkpoint-every", type=int, default=5)
    tp.add_argument("--resume", help="checkpoint to resume from")
    tp.add_argument("--no-augment", action="store_true")

    ep = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ep.add_argument("checkpoint")
    ep.add_argument("dataset_dir")
    ep.add_argument("--out", help="CSV output path (default: stdout)")

    pp = sub.add_parser("predict", help="predict flow for one sample")
    pp.add_argument("checkpoint")
    pp.add_argument("dataset_dir")
    pp.add_argument("out_dir")
    pp.add_argument("--index", type=int, default=0)

    fp = sub.add_parser("profile", help="synaptic-operation energy report")
    fp.add_argument("checkpoint")
    fp.add_argument("dataset_dir")
    fp.add_argument("--index", type=int, default=-1,
                    help="sample index; -1 averages over the dataset")
    fp.add_argument("--e-mac", type=float, default=4.6e-12)
    fp.add_argument("--e-ac", type=float, default=0.9e-12)
    fp.add_argument("--out", help="CSV output path")
    return p


def _model_flags(p):
    p.add_argument("--variant", choices=("early", "late", "ann"), default="early")
    p.add_argument("--n-steps", type=int, default=5)
    p.add_argument("--base-channels", type=int, default=8)
    p.add_argument("--frame-channels", type=int, default=2)
    p.add_argument("--neuron", choices=("sif", "if"), default="sif")


def _variant_name(v):
    return "ann_baseline" if v == "ann" else v


def _run_dir(path, force):
    os.makedirs(path, exist_ok=True)
    if force or not os.listdir(path):
        return path
    stamp = datetime.datetime.now().strftime("run-%Y%m%d-%H%M%S-%f")
    sub = os.path.join(path, stamp)
    os.makedirs(sub)
    return sub


def _load_file_config(path):
    from .io import read_config_text
    return read_config_text(path) if path else {}


def _echo_config(cfg, run_dir):
    from .io import write_config_text
    write_config_text(cfg, os.path.join(run_dir, "config.txt"))


# ---------------------------------------------------------------------------
# dataset plumbing
# ---------------------------------------------------------------------------

def _load_manifest(dataset_dir):
    path = os.path.join(dataset_dir, "manifest.txt")
    if not os.path.exists(path):
        raise FileNotFoundError("missing manifest: %s" % path)
    samples = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            frame_a, frame_b, aer, flow, dt = line.split()
            samples.append({"frame_a": frame_a, "frame_b": frame_b,
                            "aer": aer, "flow": flow, "dt": int(dt)})
    return samples


def _load_sample(dataset_dir, entry, n_steps):
    import numpy as np

    from .events import discretize
    from .io import read_aer, read_flo, read_pgm
    from .training import Sample
    fa = read_pgm(os.path.join(dataset_dir, entry["frame_a"]))
    fb = read_pgm(os.path.join(dataset_dir, entry["frame_b"]))
    stream = read_aer(os.path.join(dataset_dir, entry["aer"]))
    flow = read_flo(os.path.join(dataset_dir, entry["flow"]))
    spikes = discretize(stream, n_steps).data
    frames = np.stack([fa, fb]).astype(np.float32)
    return Sample(spikes.astype(np.float32), frames, flow.astype(np.float64))


def _load_dataset(dataset_dir, n_steps, on_error="raise"):
    entries = _load_manifest(dataset_dir)
    samples, bad = [], 0
    for entry in entries:
        try:
            samples.append(_load_sample(dataset_dir, entry, n_steps))
        except Exception as e:  # corrupt sample: skip with warning, count
            if on_error == "raise":
                raise
            bad += 1
            print("warning: skipping corrupt sample %r: %s" % (entry["aer"], e),
                  file=sys.stderr)
    if entries and bad > 0.1 * len(entries):
        raise ValueError("%d of %d samples corrupt (>10%%), aborting"
                         % (bad, len(entries)))
    return samples, entries


# ---------------------------------------------------------------------------
# model plumbing
# ---------------------------------------------------------------------------

def _model_config_from(args, file_cfg, hw):
    from .network import FusionConfig
    from .neurons import SifConfig
    merged = dict(file_cfg)
    merged.update({
        "variant": _variant_name(args.variant),
        "n_steps": args.n_steps,
        "base_channels": args.base_channels,
        "frame_channels": args.frame_channels,
        "neuron": args.neuron,
        "input_h": hw[0], "input_w": hw[1],
    })
    return FusionConfig.from_dict(merged)


def _save_model(model, path):
    import numpy as np

    from .io import write_checkpoint
    write_checkpoint(model.state_dict(), path)
    opt = getattr(model, "_opt_state", None)
    side = {"epoch": np.asarray(getattr(model, "_epoch", 0))}
    if opt is not None:
        side["opt_t"] = np.asarray(opt["t"])
        for k, v in opt["m"].items():
            side["opt_m/" + k] = v
        for k, v in opt["v"].items():
            side["opt_v/" + k] = v
    np.savez(path + ".state.npz", **side)


def _load_model(checkpoint, config_path=None):
    import numpy as np

    from .io import read_checkpoint, read_config_text
    from .network import FusionConfig, build
    if config_path is None:
        config_path = os.path.join(os.path.dirname(checkpoint) or ".", "config.txt")
    cfg = FusionConfig.from_dict(read_config_text(config_path))
    model = build(cfg, seed=0)
    model.load_state_dict(read_checkpoint(checkpoint))
    state_path = checkpoint + ".state.npz"
    if os.path.exists(state_path):
        with np.load(state_path) as st:
            model._epoch = int(st["epoch"])
            if "opt_t" in st:
                opt = {"t": int(st["opt_t"]), "m": {}, "v": {}}
                for k in st.files:
                    if k.startswith("opt_m/"):
                        opt["m"][k[6:]] = st[k]
                    elif k.startswith("opt_v/"):
                        opt["v"][k[6:]] = st[k]
                model._opt_state = opt
    return model


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    import numpy as np

    from .events import SceneSpec, generate_events, synth_sequence
    from .io import read_config_text, read_pgm, write_aer, write_flo, write_pgm
    spec_cfg = read_config_text(args.spec)
    rng = np.random.default_rng(args.seed)
    if "texture" in spec_cfg:
        texture = read_pgm(spec_cfg["texture"])
    else:
        th = int(spec_cfg.get("texture_size", 160))
        texture = rng.random((th, th))
    motion = (float(spec_cfg.get("motion_dx", 1.0)),
              float(spec_cfg.get("motion_dy", 0.0)))
    spec = SceneSpec(
        texture=texture,
        motion=motion,
        num_frames=int(spec_cfg.get("num_frames", 10)),
        frame_interval=int(spec_cfg.get("frame_interval", 10000)),
        theta=float(spec_cfg.get("theta", 0.2)),
        height=int(spec_cfg.get("height", 64)),
        width=int(spec_cfg.get("width", 64)),
    )
    substeps = int(spec_cfg.get("substeps", 16))
    dt = args.dt
    run_dir = _run_dir(args.out_dir, args.force)
    echo = dict(spec_cfg)
    echo.update({"dt": dt, "seed": args.seed, "command": "synth"})
    _echo_config(echo, run_dir)

    frames, flows = synth_sequence(spec)
    stream = generate_events(frames, spec.theta, substeps=substeps)
    for k, frame in enumerate(frames.frames):
        write_pgm(frame, os.path.join(run_dir, "frame_%04d.pgm" % k))
    lines = []
    for k in range(len(frames) - dt):
        t0, t1 = frames.timestamps[k], frames.timestamps[k + dt]
        window = stream.slice_window(t0, t1)
        aer_name = "events_%04d_dt%d.aer" % (k, dt)
        write_aer(window, os.path.join(run_dir, aer_name))
        gt = np.sum(flows[k:k + dt], axis=0)
        flow_name = "flow_%04d_dt%d.flo" % (k, dt)
        write_flo(gt, os.path.join(run_dir, flow_name))
        lines.append("frame_%04d.pgm frame_%04d.pgm %s %s %d"
                     % (k, k + dt, aer_name, flow_name, dt))
    with open(os.path.join(run_dir, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
    print("wrote %d samples to %s" % (len(lines), run_dir))
    return 0


def cmd_train(args):
    from .losses import LossConfig
    from .network import build
    from .training import TrainConfig, train
    file_cfg = _load_file_config(args.config)
    samples, entries = _load_dataset(args.dataset_dir, args.n_steps,
                                     on_error="skip")
    if not samples:
        raise ValueError("dataset %s has no usable samples" % args.dataset_dir)
    run_dir = _run_dir(args.out_dir, args.force)
    crop = args.crop_size
    model_cfg = _model_config_from(args, file_cfg, (crop, crop))
    train_cfg = TrainConfig(lr0=args.lr0, epochs=args.epochs,
                            batch_size=args.batch_size, crop_size=crop,
                            seed=args.seed)
    loss_cfg = LossConfig(smooth_weight=args.smooth_weight)
    echo = model_cfg.to_dict()
    echo.update({"lr0": train_cfg.lr0, "epochs": train_cfg.epochs,
                 "batch_size": train_cfg.batch_size, "crop_size": crop,
                 "lambda": loss_cfg.smooth_weight, "seed": args.seed,
                 "command": "train"})
    _echo_config(echo, run_dir)

    if args.resume:
        model = _load_model(args.resume)
    else:
        model = build(model_cfg, seed=args.seed)
    _save_model(model, os.path.join(run_dir, "checkpoint_initial.ffnw"))

    every = max(1, args.checkpoint_every)

    def checkpoint_fn(m, epoch):
        if (epoch + 1) % every == 0:
            _save_model(m, os.path.join(run_dir,
                                        "checkpoint_epoch%03d.ffnw" % epoch))

    log = train(model, samples, train_cfg, loss_cfg,
                log_path=os.path.join(run_dir, "train_log.csv"),
                checkpoint_fn=checkpoint_fn,
                do_augment=not args.no_augment)
    _save_model(model, os.path.join(run_dir, "checkpoint_final.ffnw"))
    if log:
        print("final loss %.6g (%d steps) -> %s"
              % (log[-1]["loss_total"], len(log), run_dir))
    return 0


def _predict_sample(model, sample):
    from .network import forward
    scales = forward(model, sample.spikes[None], sample.frames[None], train=False)
    return scales.flows[-1].data[0]


def cmd_eval(args):
    import csv

    from .evaluation import EmptyMaskError, EvalMask, FlowField, aee, event_mask
    from .events import SpikeVolume
    model = _load_model(args.checkpoint)
    samples, entries = _load_dataset(args.dataset_dir, model.config.n_steps)
    rows = []
    total_all, total_ev, n_ev = 0.0, 0.0, 0
    for i, (sample, entry) in enumerate(zip(samples, entries)):
        pred = _predict_sample(model, sample)
        est = FlowField.from_array(pred)
        gt = FlowField.from_array(sample.flow)
        a_all = aee(est, gt, EvalMask.full(gt.u.shape))
        mask = event_mask(SpikeVolume(sample.spikes, sample.spikes.shape[0]))
        try:
            a_ev = aee(est, gt, mask)
            total_ev += a_ev
            n_ev += 1
        except EmptyMaskError:
            a_ev = "n/a"
        total_all += a_all
        rows.append([entry["aer"], entry["dt"], "%.6g" % a_all,
                     a_ev if a_ev == "n/a" else "%.6g" % a_ev, mask.m])
    agg_all = total_all / len(rows) if rows else float("nan")
    agg_ev = total_ev / n_ev if n_ev else "n/a"
    rows.append(["aggregate", "", "%.6g" % agg_all,
                 agg_ev if agg_ev == "n/a" else "%.6g" % agg_ev, ""])
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    wr = csv.writer(out)
    wr.writerow(["sequence", "dt", "aee_all", "aee_event", "m_event"])
    wr.writerows(rows)
    if args.out:
        out.close()
    return 0


def cmd_predict(args):
    from PIL import Image

    from .evaluation import FlowField, flow_to_color
    from .io import write_flo
    model = _load_model(args.checkpoint)
    samples, entries = _load_dataset(args.dataset_dir, model.config.n_steps)
    if not (0 <= args.index < len(samples)):
        raise ValueError("sample index %d out of range" % args.index)
    run_dir = _run_dir(args.out_dir, args.force)
    _echo_config({"command": "predict", "checkpoint": args.checkpoint,
                  "index": args.index, "seed": args.seed}, run_dir)
    pred = _predict_sample(model, samples[args.index])
    write_flo(pred, os.path.join(run_dir, "flow.flo"))
    rgb = flow_to_color(FlowField.from_array(pred))
    Image.fromarray(rgb).save(os.path.join(run_dir, "flow.png"))
    print("wrote flow.flo and flow.png to %s" % run_dir)
    return 0


def cmd_profile(args):
    from .energy import LayerOps, OpsReport, energy, profile
    model = _load_model(args.checkpoint)
    samples, entries = _load_dataset(args.dataset_dir, model.config.n_steps)
    if args.index >= 0:
        if args.index >= len(samples):
            raise ValueError("sample index %d out of range" % args.index)
        chosen = [samples[args.index]]
    else:
        chosen = samples
    reports = []
    for s in chosen:
        rep, _ = profile(model, s.spikes[None], s.frames[None])
        reports.append(rep)
    # average F per layer over samples, recompute ops from the means
    merged = []
    for layer_idx in range(len(reports[0].layers)):
        ls = [r.layers[layer_idx] for r in reports]
        ref = ls[0]
        f_mean = sum(l.f for l in ls) / len(ls)
        merged.append(LayerOps(ref.name, ref.role, ref.m, ref.c, f_mean,
                               ref.n_steps))
    report = OpsReport(merged)
    erep = energy(report, e_mac=args.e_mac, e_ac=args.e_ac,
                  label=model.config.variant)
    print(report.to_csv() if args.out is None else "", end="")
    print("ops_snn = %.6g, ops_ann = %.6g" % (report.ops_snn, report.ops_ann))
    print("E_total = %.6g mJ (e_mac=%.3g J, e_ac=%.3g J)"
          % (erep.e_total * 1e3, args.e_mac, args.e_ac))
    per_layer_f, global_f = report.mean_activity()
    print("spiking activity: per-layer mean %.4g%%, spike-weighted %.4g%%"
          % (per_layer_f * 100, global_f * 100))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report.to_csv())
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "predict": cmd_predict, "profile": cmd_profile}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    _apply_threads(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except OSError as e:
        print("I/O error: %s" % e, file=sys.stderr)
        return 4
    except (ArithmeticError,) as e:
        print("numerical failure: %s" % e, file=sys.stderr)
        return 3
    except ValueError as e:
        print("invalid input: %s" % e, file=sys.stderr)
        return 2
    except RuntimeError as e:
        print("numerical failure: %s" % e, file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

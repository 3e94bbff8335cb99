"""Command line entry point: ``facemotor <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import landmarks as lm
from .blendshape_rig import BlendshapeRig, build_default_rig, read_coeffs_csv, write_coeffs_csv
from .dtw_align import FeatureSequence, dtw
from .emotion_decoder import (EmotionDecoder, SyntheticCorpus, corpus_from_bytes,
                              corpus_to_bytes)
from .face_oracle import FaceOracle, OracleConfig, build_oracle, load_config
from .inverse_solver import SolverOptions, blendshape_to_motor
from .metrics import Calibration, evaluate_sequence
from .motor_protocol import (N_MOTORS, default_table, encode_servo_frame, load_spec_table,
                             normalize)
from .self_model import Dataset, SelfModel, TrainConfig, generate_dataset

log = logging.getLogger("facemotor")


def _print_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def _table(args):
    if getattr(args, "table", None):
        return load_spec_table(Path(args.table).read_text())
    return default_table()


# -- motors CSV: one row per (frame, motor id) over all 33 motors -------------

MOTOR_COLUMNS = ["frame", "motor_id", "normalized", "pwm"]


def write_motors_csv(path, commands, table) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MOTOR_COLUMNS)
        for t, cmd in enumerate(commands):
            for spec, pwm in zip(table, cmd):
                w.writerow([t, spec.id, repr(normalize(pwm, spec)), pwm])


def read_motors_csv(path) -> list[list[int]]:
    frames: dict[int, dict[int, int]] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            frames.setdefault(int(rec["frame"]), {})[int(rec["motor_id"])] = int(rec["pwm"])
    out = []
    for t in sorted(frames):
        row = frames[t]
        if sorted(row) != list(range(1, N_MOTORS + 1)):
            raise ValueError(f"{path}: frame {t} does not list motors 1..{N_MOTORS}")
        out.append([row[i] for i in range(1, N_MOTORS + 1)])
    if not out:
        raise ValueError(f"{path}: no motor rows")
    return out


def resample_hold(commands, input_rate: float, rate: float) -> list:
    """Zero-order hold from ``input_rate`` to the servo ``rate``."""
    if input_rate <= 0 or rate <= 0:
        raise ValueError("rates must be positive")
    duration = len(commands) / input_rate
    n_out = max(1, int(round(duration * rate)))
    idx = np.minimum((np.arange(n_out) * input_rate / rate).astype(int), len(commands) - 1)
    return [commands[i] for i in idx]


def _read_indices(path):
    raw = json.loads(Path(path).read_text())
    if isinstance(raw, dict):
        raw = raw.get("indices", raw)
    return lm.check_index_set(raw)


# -- subcommands ---------------------------------------------------------------

def cmd_motor_table(args):
    sys.stdout.write(_table(args).to_text())


def cmd_build_oracle(args):
    config = load_config(args.config) if args.config else OracleConfig()
    if args.linear:
        config = OracleConfig.linear()
    oracle = build_oracle(args.seed, config)
    oracle.save(args.out)
    _print_json({"out": args.out, "seed": args.seed, "fingerprint": oracle.fingerprint().hex()})


def cmd_build_rig(args):
    rig = build_default_rig(FaceOracle.load(args.oracle))
    rig.save(args.out)
    _print_json({"out": args.out, "blendshapes": len(rig.deltas)})


def cmd_gen_data(args):
    oracle = FaceOracle.load(args.oracle)
    data = generate_dataset(oracle, args.count, args.seed)
    data.save(args.out)
    _print_json({"out": args.out, "count": args.count, "seed": args.seed})


def cmd_train(args):
    config = TrainConfig.from_json(Path(args.config).read_text()) if args.config else TrainConfig()
    data = Dataset.load(args.data)
    t0 = time.perf_counter()
    model = SelfModel.from_config(config).fit(data.motors, data.landmarks, data.region_mask,
                                              data.motor_groups)
    model.save(args.out)
    _print_json({"out": args.out, "train_mae": model.train_mae_, "val_mae": model.val_mae_,
                 "seconds": time.perf_counter() - t0})


def cmd_retarget(args):
    model = SelfModel.load(args.model)
    rig = BlendshapeRig.load(args.rig)
    coeffs = read_coeffs_csv(args.coeffs)
    options = SolverOptions(max_iterations=args.max_iterations, step_size=args.step_size,
                            init_mode=args.init_mode)
    motors, reports = blendshape_to_motor(model, rig, coeffs, options, return_reports=True)
    table = _table(args)
    commands = [table.to_full_command(m) for m in motors]
    write_motors_csv(args.out, commands, table)
    if args.servo_frames:
        Path(args.servo_frames).write_bytes(
            b"".join(encode_servo_frame(c, t % 65536) for t, c in enumerate(commands)))
    losses = [r.final_loss for r in reports]
    _print_json({"out": args.out, "frames": len(commands), "max_loss": max(losses),
                 "mean_loss": float(np.mean(losses)),
                 "mean_iterations": float(np.mean([r.iterations_used for r in reports]))})


def cmd_encode_servo(args):
    commands = read_motors_csv(args.motors)
    input_rate = args.input_rate or args.rate
    stream = resample_hold(commands, input_rate, args.rate)
    data = b"".join(encode_servo_frame(c, t % 65536) for t, c in enumerate(stream))
    Path(args.out).write_bytes(data)
    _print_json({"out": args.out, "frames": len(stream), "rate_hz": args.rate,
                 "duration_s": len(stream) / args.rate})


def cmd_align(args):
    a, b = FeatureSequence.load(args.a), FeatureSequence.load(args.b)
    path = dtw(a, b, band=args.band)
    Path(args.out).write_text(path.to_json())
    _print_json({"out": args.out, "steps": len(path), "total_cost": path.total_cost})


def cmd_synth_corpus(args):
    gen = SyntheticCorpus(args.seed, args.contents, args.emotions, (args.min_len, args.max_len))
    corpus = gen.samples()
    Path(args.out).write_bytes(corpus_to_bytes(corpus))
    if args.features_dir:
        d = Path(args.features_dir)
        d.mkdir(parents=True, exist_ok=True)
        for s in corpus:
            s.audio_features.save(d / f"c{s.content_id}_e{s.emotion_id}.fseq")
            write_coeffs_csv(d / f"c{s.content_id}_e{s.emotion_id}.csv", s.blendshapes)
    _print_json({"out": args.out, "samples": len(corpus)})


def cmd_train_decoder(args):
    corpus = corpus_from_bytes(Path(args.corpus).read_bytes())
    params = json.loads(Path(args.config).read_text()) if args.config else {}
    if "holdout" in params:
        params["holdout"] = tuple(tuple(c) for c in params["holdout"])
    t0 = time.perf_counter()
    model = EmotionDecoder(**params).fit(corpus)
    model.save(args.out)
    _print_json({"out": args.out, "initial_loss": model.initial_loss_,
                 "final_loss": model.final_loss_, "seconds": time.perf_counter() - t0})


def cmd_infer(args):
    model = EmotionDecoder.load(args.model)
    coeffs = model.predict(FeatureSequence.load(args.features))
    write_coeffs_csv(args.out, coeffs)
    _print_json({"out": args.out, "frames": len(coeffs)})


def cmd_eval(args):
    gt, pred = lm.load_landmarks(args.gt), lm.load_landmarks(args.pred)
    lips = _read_indices(args.lips) if args.lips else None
    eyes = _read_indices(args.eyes) if args.eyes else None
    result = evaluate_sequence(gt, pred, Calibration(args.mm_per_unit), lips, eyes)
    if not args.per_frame:
        result.pop("per_frame")
    print(f"LVE {result['lve_mm']:.4f} mm  EVE {result['eve_mm']:.4f} mm  "
          f"MAE {result['mae_mm']:.4f} mm", file=sys.stderr)
    _print_json(result)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="facemotor", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("motor-table", help="print the motor control table")
    s.add_argument("--table")
    s.set_defaults(func=cmd_motor_table)

    s = sub.add_parser("build-oracle", help="build a simulated face")
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--config", help="OracleConfig JSON")
    s.add_argument("--linear", action="store_true", help="no squashing, no coupling")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_oracle)

    s = sub.add_parser("build-rig", help="derive the default blendshape rig from an oracle")
    s.add_argument("--oracle", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_rig)

    s = sub.add_parser("gen-data", help="random motor babbling through the oracle")
    s.add_argument("--oracle", required=True)
    s.add_argument("--count", type=int, default=5000)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train the self-model")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="TrainConfig JSON")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("retarget", help="blendshape coefficients -> motor commands")
    s.add_argument("--model", required=True)
    s.add_argument("--rig", required=True)
    s.add_argument("--coeffs", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--servo-frames")
    s.add_argument("--table")
    s.add_argument("--max-iterations", type=int, default=500)
    s.add_argument("--step-size", type=float, default=SolverOptions.step_size)
    s.add_argument("--init-mode", default="warm_start_previous",
                   choices=["warm_start_previous", "neutral_start"])
    s.set_defaults(func=cmd_retarget)

    s = sub.add_parser("encode-servo", help="motors CSV -> binary servo frames")
    s.add_argument("--motors", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--rate", type=float, default=50.0, help="servo frame rate in Hz")
    s.add_argument("--input-rate", type=float, help="frame rate of the motors CSV (default: --rate)")
    s.set_defaults(func=cmd_encode_servo)

    s = sub.add_parser("align", help="DTW between two .fseq files")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--band", type=int)
    s.set_defaults(func=cmd_align)

    s = sub.add_parser("synth-corpus", help="write a synthetic disentangling corpus")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--contents", type=int, default=4)
    s.add_argument("--emotions", type=int, default=3)
    s.add_argument("--min-len", type=int, default=16)
    s.add_argument("--max-len", type=int, default=28)
    s.add_argument("--features-dir", help="also export each sample as .fseq + coeffs .csv")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_corpus)

    s = sub.add_parser("train-decoder", help="train the emotion decoder on a corpus")
    s.add_argument("--corpus", required=True)
    s.add_argument("--config", help="JSON of EmotionDecoder parameters")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_decoder)

    s = sub.add_parser("infer", help="features -> blendshape coefficients")
    s.add_argument("--model", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="LVE / EVE / MAE between landmark sequences")
    s.add_argument("--gt", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--lips", help="JSON list of lip landmark indices")
    s.add_argument("--eyes", help="JSON list of eye/forehead landmark indices")
    s.add_argument("--mm-per-unit", type=float, default=100.0)
    s.add_argument("--per-frame", action="store_true")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, OSError) as exc:
        print(f"facemotor {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

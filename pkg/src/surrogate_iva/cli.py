"""Command line interface: ``surrogate-iva {simulate,separate,train,eval}``.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O failure,
4 numerical failure during separation, 5 degenerate training run.

``SURROGATE_IVA_DATA`` and ``SURROGATE_IVA_WEIGHTS`` provide defaults for
``--data`` and ``--weights``.
"""
import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import mixsim
from .glu import load_archive
from .iva import AuxIvaConfig, NonFiniteError, auxiva_run, default_iters
from .metrics import minimal_distortion_scale, pit_wrap, si_sdr, si_sir
from .stft import StftConfig, istft, stft
from .train import TrainConfig, TrainingDegenerate, train
from .wavio import read_wav, write_wav

log = logging.getLogger("surrogate_iva")

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_TRAIN = 2, 3, 4, 5


class ConfigError(ValueError):
    pass


def _model(args, n_bins):
    if args.model != "glu":
        return args.model
    if not args.weights:
        raise ConfigError("--model glu needs --weights")
    return load_archive(args.weights, n_bins=n_bins)


def _check_algo(algo, m):
    if algo == "ip2" and m != 2:
        raise ConfigError(f"--algo ip2 supports two channels only, got {m}")


def cmd_simulate(args):
    spec = mixsim.MixtureSpec(
        n_sources=args.sources,
        mixing=args.mixing,
        taps=args.taps,
        decay=args.decay,
        duration_s=args.duration,
        noise_snr_db=None if args.no_noise else tuple(args.noise_snr),
        relative_snr_db=tuple(args.relative_snr),
        source_kind="wavpool" if args.wav_pool else "synthetic",
        wav_pool=args.wav_pool or "",
        seed=args.seed,
    )
    fractions = (1.0 - args.val_frac - args.test_frac, args.val_frac, args.test_frac)
    items = mixsim.make_dataset(spec, args.items, args.out, fractions)
    print(f"wrote {len(items)} items to {args.out}")
    return 0


def separate_signal(x, model, algo, n_iters, stft_cfg, refs=None, ref_mic=0):
    """Separate an (M, T) mixture; returns (estimates (M, T'), trace)."""
    X = stft(torch.as_tensor(x, dtype=torch.float64), stft_cfg)
    cfg = AuxIvaConfig(algo=algo, n_iters=n_iters, model=model)
    if isinstance(model, torch.nn.Module):
        model.eval()
    with torch.no_grad():
        Y, _, trace = auxiva_run(X, cfg, refs=refs, stft_cfg=stft_cfg, ref_mic=ref_mic)
        scaled, _ = minimal_distortion_scale(Y, X[ref_mic])
        est = istft(scaled, stft_cfg)
    return est.numpy(), trace


def cmd_separate(args):
    x, rate = read_wav(args.input)
    m = x.shape[0]
    _check_algo(args.algo, m)
    stft_cfg = StftConfig(args.frame_size)
    model = _model(args, stft_cfg.n_bins)
    refs = None
    if args.refs:
        if len(args.refs) != m:
            raise ConfigError(f"expected {m} reference files, got {len(args.refs)}")
        refs = np.concatenate([read_wav(p)[0] for p in args.refs])
    n_iters = args.iters or default_iters(m)
    est, trace = separate_signal(x, model, args.algo, n_iters, stft_cfg, refs, args.ref_mic)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, s in enumerate(est):
        write_wav(out / f"source{k}.wav", s, rate)
    if refs is not None:
        with open(out / "trace.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "source", "si_sdr_db"])
            for t, vals in enumerate(trace.si_sdr):
                for k, v in enumerate(vals):
                    w.writerow([t, k, repr(float(v))])
    if trace.nll:
        with open(out / "nll.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "nll"])
            for t, v in enumerate(trace.nll):
                w.writerow([t, repr(float(v))])
    print(f"wrote {m} sources to {out}")
    return 0


def cmd_train(args):
    cfg = TrainConfig(
        loss=args.loss,
        n_iters_unrolled=args.iters,
        learning_rate=args.lr,
        autoclip_percentile=args.autoclip,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        sample_length_s=args.sample_length,
        max_epochs=args.epochs,
        seed=args.seed,
        frame_size=args.frame_size,
        hidden=args.hidden,
        dropout=args.dropout,
        detach_weights=args.detach_weights,
    )
    torch.manual_seed(args.seed)
    records = train(args.data, cfg, args.out, log_path=args.log)
    best = max(r["value"] for r in records if r["split"] == "val")
    print(f"best validation SI-SDR {best:.2f} dB, model written to {args.out}")
    return 0


def evaluate_items(items, model, algo, n_iters, stft_cfg, ref_mic=0):
    """Per-item metrics after PIT alignment; returns a list of dicts."""
    rows = []
    for it in items:
        x, refs = mixsim.load_item(it)
        est, _ = separate_signal(x, model, algo, n_iters or default_iters(it.M), stft_cfg, ref_mic=ref_mic)
        n = est.shape[-1]
        est_t = torch.as_tensor(est)
        ref_t = torch.as_tensor(refs[:, :n])
        res = pit_wrap(est_t, ref_t, "si_sdr")
        sirs = [float(si_sir(est_t[res.permutation[k]], ref_t, k)) for k in range(it.M)]
        mix_t = torch.as_tensor(x[:, :n])
        inp = pit_wrap(mix_t, ref_t, "si_sdr")
        rows.append(
            {
                "id": it.id,
                "M": it.M,
                "si_sdr_db": float(res.value),
                "si_sir_db": float(np.mean(sirs)),
                "input_si_sdr_db": float(inp.value),
                "finite": bool(np.isfinite(est).all()),
            }
        )
    return rows


def cmd_eval(args):
    items = [it for it in mixsim.read_manifest(args.data) if it.split == args.split]
    if not items:
        raise ConfigError(f"no items in split {args.split!r}")
    m_values = {it.M for it in items}
    for m in m_values:
        _check_algo(args.algo, m)
    stft_cfg = StftConfig(args.frame_size)
    model = _model(args, stft_cfg.n_bins)
    rows = evaluate_items(items, model, args.algo, args.iters, stft_cfg, args.ref_mic)
    loss = args.loss if args.model == "glu" else "-"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fields = ["id", "model", "algo", "loss", "M", "si_sdr_db", "si_sir_db", "input_si_sdr_db"]
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for r in rows:
            w.writerow(
                [r["id"], args.model, args.algo, loss, r["M"]]
                + [repr(r[k]) for k in ("si_sdr_db", "si_sir_db", "input_si_sdr_db")]
            )
    summary = {
        "model": args.model,
        "algo": args.algo,
        "loss": loss,
        "M": sorted(m_values),
        "n_items": len(rows),
        "median_si_sdr_db": float(np.median([r["si_sdr_db"] for r in rows])),
        "median_si_sir_db": float(np.median([r["si_sir_db"] for r in rows])),
        "median_input_si_sdr_db": float(np.median([r["input_si_sdr_db"] for r in rows])),
        "all_finite": all(r["finite"] for r in rows),
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(
        f"{args.model}/{args.algo}: median SI-SDR {summary['median_si_sdr_db']:.2f} dB, "
        f"SI-SIR {summary['median_si_sir_db']:.2f} dB over {len(rows)} items"
    )
    return 0


def build_parser():
    env_data = os.environ.get("SURROGATE_IVA_DATA")
    env_weights = os.environ.get("SURROGATE_IVA_WEIGHTS")
    p = argparse.ArgumentParser(
        prog="surrogate-iva", description="AuxIVA source separation with learned surrogate source models."
    )
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic mixture dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--sources", type=int, default=2)
    s.add_argument("--items", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mixing", choices=["convolutive", "instantaneous"], default="convolutive")
    s.add_argument("--taps", type=int, default=32)
    s.add_argument("--decay", type=float, default=6.0)
    s.add_argument("--duration", type=float, default=2.0)
    s.add_argument("--relative-snr", type=float, nargs=2, default=(-5.0, 5.0))
    s.add_argument("--noise-snr", type=float, nargs=2, default=(10.0, 30.0))
    s.add_argument("--no-noise", action="store_true")
    s.add_argument("--val-frac", type=float, default=0.05)
    s.add_argument("--test-frac", type=float, default=0.05)
    s.add_argument("--wav-pool", help="directory of mono WAV files to draw sources from")
    s.set_defaults(func=cmd_simulate)

    def model_flags(q):
        q.add_argument("--model", choices=["laplace", "gauss", "glu"], default="laplace")
        q.add_argument("--weights", default=env_weights, help="GLU archive (.ssma)")
        q.add_argument("--algo", choices=["iss", "ip2"], default="iss")
        q.add_argument("--iters", type=int, help="AuxIVA iterations (default 20/50/80 for 2/3/4 sources)")
        q.add_argument("--frame-size", type=int, default=4096)
        q.add_argument("--ref-mic", type=int, default=0)

    s = sub.add_parser("separate", help="separate a multichannel WAV file")
    s.add_argument("input")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--refs", nargs="+", help="reference WAVs, one per source, to trace SI-SDR")
    model_flags(s)
    s.set_defaults(func=cmd_separate)

    s = sub.add_parser("train", help="train the GLU surrogate model")
    s.add_argument("--data", default=env_data, required=env_data is None)
    s.add_argument("--out", required=True, help="archive path (.ssma)")
    s.add_argument("--log", help="training log (JSON lines)")
    s.add_argument("--loss", choices=["sisdr", "coherence"], default="sisdr")
    s.add_argument("--iters", type=int, default=20)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--batch-size", type=int, default=4)
    s.add_argument("--autoclip", type=float, default=10.0)
    s.add_argument("--weight-decay", type=float, default=5e-5)
    s.add_argument("--sample-length", type=float, default=6.0)
    s.add_argument("--frame-size", type=int, default=4096)
    s.add_argument("--hidden", type=int, default=128)
    s.add_argument("--dropout", type=float, default=0.5)
    s.add_argument("--detach-weights", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a model on a dataset split")
    s.add_argument("--data", default=env_data, required=env_data is None)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--split", default="test")
    s.add_argument("--loss", default="sisdr", help="label of the loss the GLU model was trained with")
    model_flags(s)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s"
    )
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except TrainingDegenerate as err:
        print(f"training failed: {err}", file=sys.stderr)
        return EXIT_TRAIN
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

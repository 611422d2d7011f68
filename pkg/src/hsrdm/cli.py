"""Command-line front end: generate / fit / forecast / evaluate / segment.

Exit codes: 0 success, 1 runtime failure (with a JSON error record on
stderr), 2 usage errors.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import datasets, io, metrics
from .errors import EmptyDataset, HsrdmError
from .forecast import ForecastRequest, decode_states, partial_forecast
from .inference import run_cavi


def _build_parser():
    parser = argparse.ArgumentParser(prog="hsrdm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic benchmark dataset")
    p.add_argument("--preset", required=True, choices=["figure-eight", "marching-band"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--options", default=None, help="JSON file of generator config overrides")

    p = sub.add_parser("fit", help="fit a model with coordinate ascent")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--holdout-entities", default=None,
                   help="comma-separated entities whose tail is held out")
    p.add_argument("--holdout-from", type=int, default=None,
                   help="first held-out timestep for the held-out entities")

    p = sub.add_parser("forecast", help="sample held-out trajectories")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="compute metrics from forecasts or segmentations")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--forecast", default=None, help="forecast CSV to score")
    p.add_argument("--segmentation", default=None, help="segmentation CSV to score")
    p.add_argument("--bounds", default=None, help="lo,hi box for pct-in-bounds (per-dim)")

    p = sub.add_parser("segment", help="decode most likely state paths")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    return parser


def _cmd_generate(args):
    options = {}
    if args.options:
        options = json.loads(Path(args.options).read_text())
    options["seed"] = args.seed
    if args.preset == "figure-eight":
        data, latents = datasets.generate_figure_eight(datasets.FigureEightConfig(**options))
    else:
        pairs = datasets.generate_marching_band(datasets.MarchingBandConfig(**options))
        data, latents = datasets.stack_sequences(pairs)
    io.save_dataset(args.out, data, latents)
    print(f"wrote dataset: T={data.n_timesteps} J={data.n_entities} D={data.obs_dim} -> {args.out}")
    return 0


def _parse_holdout(args, data):
    if args.holdout_entities is None:
        return None
    if args.holdout_from is None:
        raise ValueError("--holdout-entities requires --holdout-from")
    lengths = np.full(data.n_entities, data.n_timesteps, dtype=np.int64)
    for tok in args.holdout_entities.split(","):
        lengths[int(tok)] = args.holdout_from
    return lengths


def _cmd_fit(args):
    config = io.load_config(args.config)
    data = io.load_dataset(args.data)
    if data.n_timesteps < 2:
        raise EmptyDataset("dataset too short to fit")
    lengths = _parse_holdout(args, data)
    params, _, trace = run_cavi(
        data, config.n_system_states, config.n_entity_states,
        config.system_recurrence, config.entity_recurrence, config.inference,
        config.emission_family, lengths=lengths)
    out = Path(args.out)
    io.save_checkpoint(out, params)
    with (out / "elbo_trace.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "phase", "value"])
        writer.writerows(trace)
    print(f"fit complete: {len(trace)} phases, final objective {trace[-1][2]:.6f}" if trace
          else "fit complete")
    return 0


def _cmd_forecast(args):
    config = io.load_config(args.config)
    params = io.load_checkpoint(args.checkpoint)
    data = io.load_dataset(args.data)
    fc = config.forecast
    if not fc:
        raise ValueError("config has no forecast block")
    request = ForecastRequest(
        target_entities=tuple(fc["target_entities"]),
        horizon=tuple(fc["horizon"]),
        n_samples=int(fc.get("n_samples", 5)),
        seed=int(fc.get("seed", config.seed)),
    )
    samples = partial_forecast(params, data, request, config=config.inference)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "entity", "timestep", "dim", "value"])
        t0 = request.horizon[0]
        for s_idx in range(samples.shape[0]):
            for j_idx, j in enumerate(request.target_entities):
                for i in range(samples.shape[2]):
                    for d in range(samples.shape[3]):
                        writer.writerow([s_idx, j, t0 + i, d, repr(samples[s_idx, j_idx, i, d])])
    print(f"wrote {samples.shape[0]} samples x {samples.shape[1]} entities -> {args.out}")
    return 0


def read_forecast_csv(path):
    """Forecast CSV -> {(sample, entity): [timesteps, dims] array}."""
    cells = {}
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            key = (int(row["sample"]), int(row["entity"]))
            cells.setdefault(key, []).append(
                (int(row["timestep"]), int(row["dim"]), float(row["value"])))
    out = {}
    for key, triples in cells.items():
        ts = sorted({t for t, _, _ in triples})
        ds = sorted({d for _, d, _ in triples})
        arr = np.empty((len(ts), len(ds)))
        t_index = {t: i for i, t in enumerate(ts)}
        for t, d, v in triples:
            arr[t_index[t], d] = v
        out[key] = (np.asarray(ts), arr)
    return out


def _cmd_evaluate(args):
    data, latents = io.load_dataset(args.data, with_latents=True)
    report = {}
    if args.forecast:
        table = read_forecast_csv(args.forecast)
        mses, mfes = {}, {}
        for (s_idx, j), (ts, arr) in table.items():
            truth = data.observations[ts, j, : arr.shape[1]]
            mses.setdefault(j, {})[s_idx] = metrics.forecast_mse(arr, truth)
            mfes.setdefault(j, {})[s_idx] = metrics.mean_forecast_error(arr, truth)
        report["forecast"] = {
            str(j): {
                "mse_per_sample": [by_sample[k] for k in sorted(by_sample)],
                "mean_forecast_error_per_sample": [mfes[j][k] for k in sorted(mfes[j])],
                "best_mse": min(by_sample.values()),
            }
            for j, by_sample in mses.items()
        }
        if args.bounds:
            lo, hi = (float(x) for x in args.bounds.split(","))
            pts = np.concatenate([arr for _, arr in table.values()], axis=0)
            D = pts.shape[1]
            report["pct_in_bounds"] = metrics.pct_in_bounds(pts, (np.full(D, lo), np.full(D, hi)))
    if args.segmentation:
        if latents is None:
            raise ValueError("dataset has no ground-truth latents")
        pred = np.loadtxt(args.segmentation, delimiter=",", skiprows=1, dtype=np.int64)
        pred_sys = pred[:, 1] if pred.ndim == 2 else pred
        n_states = int(max(pred_sys.max(), latents.system_states.max())) + 1
        acc, perm = metrics.segmentation_accuracy(pred_sys, latents.system_states, n_states)
        report["segmentation"] = {"accuracy": acc, "permutation": [int(p) for p in perm]}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True))
    print(f"wrote metrics -> {args.out}")
    return 0


def _cmd_segment(args):
    params = io.load_checkpoint(args.checkpoint)
    data = io.load_dataset(args.data)
    s_path, z_paths = decode_states(params, data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestep", "system_state"] + [f"entity_{j}" for j in range(data.n_entities)])
        for t in range(data.n_timesteps):
            writer.writerow([t, int(s_path[t])] + [int(z) for z in z_paths[t]])
    print(f"wrote segmentation -> {args.out}")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "fit": _cmd_fit,
    "forecast": _cmd_forecast,
    "evaluate": _cmd_evaluate,
    "segment": _cmd_segment,
}


def run_command(argv):
    """Entry point used by tests; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0,) else 0
    try:
        return _COMMANDS[args.command](args)
    except HsrdmError as exc:
        json.dump({"error": exc.code, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    except (ValueError, OSError, KeyError) as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1


def main():
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()

"""Command-line front end for the sonification pipeline.

Subcommands: discretize, estimate-msm, estimate-hmm, params, sample,
render, stream. Model files are explicit artifacts between stages; defaults
mirror the reference instance (k=500 observed states, m=4 metastable
states, lag 1 frame, 20 fps).
"""

from __future__ import annotations

import argparse
import sys
import time

from mdsonify import discretizer, hmm, mapping, msm, oscstream, sonparams, synth, trajio


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdsonify",
                                     description="Markov-model sonification pipeline")
    parser.add_argument("--verbose", action="store_true",
                        help="print per-stage timing to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("discretize", help="cluster features into observed states")
    p.add_argument("--features", required=True)
    p.add_argument("--format", choices=["csv", "binary"], default="csv")
    p.add_argument("--k", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--out-centers")
    p.add_argument("--out-chain", required=True)

    p = sub.add_parser("estimate-msm", help="estimate the observed Markov model")
    p.add_argument("--chain", required=True, action="append")
    p.add_argument("--lag", type=int, default=1, help="lag in frames")
    p.add_argument("--no-reversible", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("estimate-hmm", help="estimate the hidden Markov model")
    p.add_argument("--chain", required=True, action="append")
    p.add_argument("--msm", required=True, help="initializing observed model file")
    p.add_argument("--m", type=int, default=4)
    p.add_argument("--lag", type=int, default=1)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("params", help="export static and per-frame parameters")
    p.add_argument("--chain", required=True)
    p.add_argument("--msm", required=True)
    p.add_argument("--hmm", required=True)
    p.add_argument("--resolution-ps", type=float, required=True)
    p.add_argument("--bins", type=int, default=32)
    p.add_argument("--out-static", required=True)
    p.add_argument("--out-frames", required=True)

    p = sub.add_parser("sample", help="sample an example chain from the HMM")
    p.add_argument("--model", required=True)
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("render", help="render a chain to a stereo WAV file")
    p.add_argument("--chain", required=True)
    p.add_argument("--msm", required=True)
    p.add_argument("--hmm", required=True)
    p.add_argument("--resolution-ps", type=float, required=True)
    p.add_argument("--config", help="mapping config file (key=value)")
    p.add_argument("--fps", type=int, default=20)
    p.add_argument("--sample-rate", type=int, default=44100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pad-gain", type=float, default=0.25)
    p.add_argument("--pulse-gain", type=float, default=0.5)
    p.add_argument("--scan-gain", type=float, default=0.25)
    p.add_argument("--out", required=True)

    p = sub.add_parser("stream", help="stream parameters as OSC/UDP messages")
    p.add_argument("--chain", required=True)
    p.add_argument("--msm", required=True)
    p.add_argument("--hmm", required=True)
    p.add_argument("--resolution-ps", type=float, required=True)
    p.add_argument("--config")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=9000)
    p.add_argument("--fps", type=float, default=20.0)
    return parser


def _load_params(args):
    chain = trajio.load_chain(args.chain)
    observed = msm.load_model(args.msm)
    hidden = hmm.load_model(args.hmm)
    params = sonparams.extract_params(chain, observed, hidden,
                                      resolution_ps=args.resolution_ps,
                                      bins=getattr(args, "bins", 32))
    return chain, params


def _mapping_config(args) -> mapping.MappingConfig:
    if getattr(args, "config", None):
        return mapping.MappingConfig.load(args.config)
    return mapping.MappingConfig()


def _cmd_discretize(args):
    features = trajio.load_features(args.features, format=args.format)
    centers = discretizer.fit_centers(features, k=args.k, seed=args.seed,
                                      max_iter=args.max_iter)
    if args.out_centers:
        discretizer.save_centers(centers, args.out_centers)
    trajio.write_chain(discretizer.assign(features, centers), args.out_chain)


def _cmd_estimate_msm(args):
    chains = [trajio.load_chain(p) for p in args.chain]
    counts = msm.count_transitions(chains, lag=args.lag)
    model = msm.estimate_T(counts, reversible=not args.no_reversible)
    msm.save_model(model, args.out)


def _cmd_estimate_hmm(args):
    chains = [trajio.load_chain(p) for p in args.chain]
    init = msm.load_model(args.msm)
    model = hmm.estimate_hmm(chains, m=args.m, lag=args.lag, init=init,
                             tol=args.tol, max_iter=args.max_iter, seed=args.seed)
    hmm.save_model(model, args.out)


def _cmd_params(args):
    _, params = _load_params(args)
    sonparams.export_static_csv(params.static, args.out_static)
    sonparams.export_frames_csv(params.frames, args.out_frames)


def _cmd_sample(args):
    model = hmm.load_model(args.model)
    chain = hmm.sample_chain(model, length=args.length, seed=args.seed)
    trajio.write_chain(chain, args.out)


def _cmd_render(args):
    _, params = _load_params(args)
    cfg = synth.RenderConfig(sample_rate_hz=args.sample_rate, fps=args.fps,
                             seed=args.seed, pad_gain=args.pad_gain,
                             pulse_gain=args.pulse_gain, scan_gain=args.scan_gain,
                             mapping=_mapping_config(args))
    buffer = synth.render(params.frames, params.static, cfg)
    synth.write_wav(buffer, args.out)


def _cmd_stream(args):
    _, params = _load_params(args)
    clusters = mapping.build_clusters(params.static, _mapping_config(args))
    session = oscstream.StreamSession(host=args.host, port=args.port, fps=args.fps)
    try:
        oscstream.send_static(params.static, clusters, session)
        stats = oscstream.stream_frames(params.frames, session)
    finally:
        session.close()
    print(f"sent={stats.sent} duration_s={stats.duration_s:.3f} "
          f"max_scheduling_error_s={stats.max_scheduling_error_s:.6f} "
          f"overruns={stats.overruns}")


_COMMANDS = {
    "discretize": _cmd_discretize,
    "estimate-msm": _cmd_estimate_msm,
    "estimate-hmm": _cmd_estimate_hmm,
    "params": _cmd_params,
    "sample": _cmd_sample,
    "render": _cmd_render,
    "stream": _cmd_stream,
}


def run(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    start = time.monotonic()
    try:
        _COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError, IndexError) as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1
    if args.verbose:
        print(f"{args.command}: {time.monotonic() - start:.3f}s", file=sys.stderr)
    return 0


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()

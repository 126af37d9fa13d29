"""Command-line entry point.

Subcommands: gen-synthetic, analyze, compress, pplgrid, ndppl. Every
command takes its parameters from an optional JSON config file plus flag
overrides (flags win), validates them before touching any file, writes its
reports plus a manifest.json with sha256 hashes of inputs and outputs, and
prints the manifest to stdout. Runs are deterministic for a fixed seed.

Exit codes: 0 success, 2 usage error, 3 input-format error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import glob
import hashlib
import json
import os
import sys


from . import analysis, compression, corpus, metrics, model, training
from .errors import FormatError, NumericalError, ShapeError
from .streams import Kind, read_stream

EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_NUMERICAL = 4


def _log(msg: str) -> None:
    print(f"[kvcore] {msg}", file=sys.stderr)


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _emit_manifest(out_dir, command, config, inputs, outputs) -> str:
    canonical = json.dumps(config, sort_keys=True).encode("utf-8")
    manifest = {
        "command": command,
        "config": config,
        "config_hash": hashlib.sha256(canonical).hexdigest(),
        "inputs": {os.path.basename(p): _sha256(p) for p in inputs},
        "outputs": {os.path.basename(p): _sha256(p) for p in sorted(outputs)},
    }
    text = json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        fh.write(text)
    print(text, end="")
    return path


def _resolve_config(defaults: dict, config_path, overrides: dict) -> dict:
    """Layer config file values over defaults, then CLI flags over both.
    Keys with default None are required; unknown file keys are rejected."""
    cfg = dict(defaults)
    if config_path:
        try:
            with open(config_path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{config_path}: invalid JSON: {exc}")
        if not isinstance(data, dict):
            raise ValueError(f"{config_path}: config must be a JSON object")
        unknown = sorted(set(data) - set(defaults))
        if unknown:
            raise ValueError(f"{config_path}: unknown config keys: {unknown}")
        cfg.update(data)
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = value
    missing = sorted(k for k, v in cfg.items() if v is None)
    if missing:
        raise ValueError(f"missing required parameters: {missing}")
    return cfg


def _parse_ratio_list(value) -> list:
    if isinstance(value, str):
        parts = [p for p in value.split(",") if p.strip()]
        value = [float(p) for p in parts]
    ratios = sorted({float(r) for r in value})
    if not ratios:
        raise ValueError("ratio list is empty")
    for r in ratios:
        if not 0.0 < r <= 1.0:
            raise ValueError(f"retain ratio {r} outside (0, 1]")
    return ratios


def _thread_count(flag) -> int:
    """Resolve worker count: explicit flag, else KVCORE_THREADS, else all
    available cores. A value of 0 means auto."""
    if flag:
        n = int(flag)
    else:
        env = os.environ.get("KVCORE_THREADS")
        n = int(env) if env else (os.cpu_count() or 1)
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    return n


def _discover_streams(streams_dir: str) -> list:
    paths = sorted(glob.glob(os.path.join(streams_dir, "*.kvcr")))
    if not paths:
        raise ValueError(f"no .kvcr stream files found in {streams_dir}")
    streams = [read_stream(p) for p in paths]
    streams.sort(key=lambda s: (s.header.layer_index, int(s.header.kind)))
    return streams


def _load_spectra(spectra_dir: str) -> dict:
    paths = sorted(glob.glob(os.path.join(spectra_dir, "*.spectrum")))
    if not paths:
        raise ValueError(f"no .spectrum files found in {spectra_dir}")
    out = {}
    for p in paths:
        spec = analysis.load_spectrum(p)
        out[(spec.layer_index, spec.kind)] = (spec, p)
    return out


# -- gen-synthetic ----------------------------------------------------------

_GEN_DEFAULTS = {
    "out": None,
    "seed": 0,
    "d_e": 64,
    "n_layers": 2,
    "m_h": 8,
    "m_g": 2,
    "d_h": 8,
    "vocab": 256,
    "d_ff": 256,
    "n_seqs": 12,
    "seq_len": 96,
    "order": 1,
    "concentration": 0.05,
    "train_steps": 80,
    "lr": 3e-3,
}


def cmd_gen_synthetic(cfg: dict) -> int:
    out_dir = cfg["out"]
    os.makedirs(out_dir, exist_ok=True)
    mc = model.ModelConfig(
        d_e=cfg["d_e"], n_layers=cfg["n_layers"], m_h=cfg["m_h"],
        m_g=cfg["m_g"], d_h=cfg["d_h"], vocab=cfg["vocab"],
        d_ff=cfg["d_ff"], seed=cfg["seed"],
    )
    weights = model.init_weights(mc)
    seqs = corpus.markov_corpus(
        vocab=cfg["vocab"], n_sequences=cfg["n_seqs"], seq_len=cfg["seq_len"],
        order=cfg["order"], concentration=cfg["concentration"], seed=cfg["seed"],
    )
    _log(f"generated {sum(len(s) for s in seqs)} tokens over {len(seqs)} sequences")
    steps = int(cfg["train_steps"])
    if steps > 0:
        history = training.train_weights(mc, weights, seqs, steps=steps, lr=cfg["lr"])
        _log(
            f"trained {steps} steps: loss {history[0]:.4f} -> {history[-1]:.4f}"
        )
    ckpt = os.path.join(out_dir, "model.kvcm")
    model.save_model(ckpt, mc, weights)
    # downstream commands see the f32 checkpoint, so dump activations from it
    mc, weights = model.load_model(ckpt)
    corpus_path = os.path.join(out_dir, "corpus.u16")
    corpus.save_tokens(corpus_path, seqs)
    stream_paths = model.dump_activations(mc, weights, seqs, out_dir)
    _log(f"dumped {len(stream_paths)} activation streams to {out_dir}")
    _emit_manifest(out_dir, "gen-synthetic", cfg, [], [ckpt, corpus_path, *stream_paths])
    return 0


# -- analyze ----------------------------------------------------------------

_ANALYZE_DEFAULTS = {
    "streams": None,
    "out": None,
    "batch_size": 4096,
    "rank_tol": 1e-10,
    "threads": 0,  # 0 = auto (KVCORE_THREADS, then cpu count)
    "sigma_top": 0,  # 0 = full spectrum in the JSON report
}


def _analyze_one(stream, batch_size, rank_tol, out_dir):
    acc = analysis.CovarianceAccumulator.from_stream(stream, batch_size)
    spec = acc.finalize(stream.header.layer_index, stream.header.kind, rank_tol)
    spath = os.path.join(
        out_dir, analysis.spectrum_filename(spec.layer_index, spec.kind)
    )
    analysis.save_spectrum(spath, spec)
    report = metrics.ner(spec)
    return spec, report, spath


def cmd_analyze(cfg: dict) -> int:
    threads = _thread_count(cfg.get("threads"))
    batch_size = int(cfg["batch_size"])
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    rank_tol = float(cfg["rank_tol"])
    sigma_top = int(cfg["sigma_top"])
    streams = _discover_streams(cfg["streams"])
    out_dir = cfg["out"]
    os.makedirs(out_dir, exist_ok=True)

    results = []
    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [
            pool.submit(_analyze_one, s, batch_size, rank_tol, out_dir)
            for s in streams
        ]
        for fut in futures:
            results.append(fut.result())
    results.sort(key=lambda t: (t[0].layer_index, int(t[0].kind)))

    rows = []
    for spec, report, _ in results:
        sigma = spec.sigma if sigma_top <= 0 else spec.sigma[:sigma_top]
        rows.append(
            {
                "layer": spec.layer_index,
                "kind": spec.kind.label,
                "erank": report.erank,
                "rank": report.rank_r,
                "ner": report.ner,
                "tokens": spec.tokens_seen,
                "sigma": [float(s) for s in sigma],
            }
        )
        _log(
            f"layer {spec.layer_index} {spec.kind.label}: rank {report.rank_r}, "
            f"erank {report.erank:.4f}, ner {report.ner:.4f}"
        )
    json_path = os.path.join(out_dir, "ner_report.json")
    with open(json_path, "w") as fh:
        fh.write(json.dumps(rows, sort_keys=True, indent=2) + "\n")
    csv_path = os.path.join(out_dir, "ner_report.csv")
    with open(csv_path, "w") as fh:
        fh.write("layer,kind,ner,erank,rank\n")
        for row in rows:
            fh.write(
                f"{row['layer']},{row['kind']},{row['ner']!r},"
                f"{row['erank']!r},{row['rank']}\n"
            )
    spectra_paths = [p for _, _, p in results]
    _emit_manifest(
        out_dir, "analyze", cfg,
        [s.path for s in streams], [json_path, csv_path, *spectra_paths],
    )
    return 0


# -- compress ---------------------------------------------------------------

_COMPRESS_DEFAULTS = {
    "spectra": None,
    "checkpoint": None,
    "streams": None,
    "out": None,
    "ratios": "0.25,0.5,1.0",
}


def cmd_compress(cfg: dict) -> int:
    ratios = _parse_ratio_list(cfg["ratios"])
    cfg = dict(cfg, ratios=ratios)
    mc, weights = model.load_model(cfg["checkpoint"])
    spectra = _load_spectra(cfg["spectra"])
    streams = {
        (s.header.layer_index, s.header.kind): s
        for s in _discover_streams(cfg["streams"])
    }
    out_dir = cfg["out"]
    os.makedirs(out_dir, exist_ok=True)

    entries = []
    factor_paths = []
    for (layer, kind), (spec, _) in sorted(
        spectra.items(), key=lambda kv: (kv[0][0], int(kv[0][1]))
    ):
        if layer >= mc.n_layers:
            raise ValueError(
                f"spectrum layer {layer} outside checkpoint's {mc.n_layers} layers"
            )
        stream = streams.get((layer, kind))
        if stream is None:
            raise ValueError(f"no stream file for layer {layer} {kind.label}")
        w = weights.layers[layer].w_k if kind is Kind.KEY else weights.layers[layer].w_v
        for ratio in ratios:
            factors = compression.build_factors(w, spec, float(ratio))
            fpath = os.path.join(
                out_dir, compression.factors_filename(layer, kind, factors.k)
            )
            compression.save_factors(fpath, factors)
            factor_paths.append(fpath)
            report = compression.measured_error(stream, None, factors, spec)
            entries.append(
                {
                    "layer": layer,
                    "kind": kind.label,
                    "ratio": ratio,
                    "k": factors.k,
                    "predicted_frobenius": compression.predicted_error(
                        spec, factors.k, "fro"
                    ),
                    "predicted_spectral": compression.predicted_error(
                        spec, factors.k, "two"
                    ),
                    "measured_frobenius": report.frobenius_error,
                    "measured_spectral": report.spectral_error,
                    "relative_error": report.relative_error,
                    "retained_energy": report.retained_energy,
                }
            )
            _log(
                f"layer {layer} {kind.label} ratio {ratio:g}: k={factors.k}, "
                f"measured {report.frobenius_error:.6e}, "
                f"predicted {entries[-1]['predicted_frobenius']:.6e}"
            )
    json_path = os.path.join(out_dir, "compression_report.json")
    with open(json_path, "w") as fh:
        fh.write(json.dumps(entries, sort_keys=True, indent=2) + "\n")
    inputs = [cfg["checkpoint"]]
    inputs += [p for _, p in spectra.values()]
    inputs += [s.path for s in streams.values()]
    _emit_manifest(out_dir, "compress", cfg, sorted(inputs), [json_path, *factor_paths])
    return 0


# -- pplgrid ----------------------------------------------------------------

_PPLGRID_DEFAULTS = {
    "checkpoint": None,
    "corpus": None,
    "spectra": None,
    "out": None,
    "key_ratios": "0.25,0.5,0.75,1.0",
    "value_ratios": "0.25,0.5,0.75,1.0",
    "seq_len": 128,
}


def cmd_pplgrid(cfg: dict) -> int:
    key_ratios = _parse_ratio_list(cfg["key_ratios"])
    value_ratios = _parse_ratio_list(cfg["value_ratios"])
    cfg = dict(cfg, key_ratios=key_ratios, value_ratios=value_ratios)
    mc, weights = model.load_model(cfg["checkpoint"])
    seqs = corpus.load_tokens(cfg["corpus"], int(cfg["seq_len"]))
    loaded = _load_spectra(cfg["spectra"])
    spectra = {key: spec for key, (spec, _) in loaded.items()}
    out_dir = cfg["out"]
    os.makedirs(out_dir, exist_ok=True)
    grid = model.ppl_grid(mc, weights, seqs, key_ratios, value_ratios, spectra)
    _log(
        f"ppl grid {grid.ppl.shape[0]}x{grid.ppl.shape[1]}: "
        f"min {grid.ppl.min():.4f}, max {grid.ppl.max():.4f}"
    )
    csv_path = os.path.join(out_dir, "ppl_grid.csv")
    metrics.save_ppl_grid(csv_path, grid)
    spectra_paths = [p for _, p in loaded.values()]
    _emit_manifest(
        out_dir, "pplgrid", cfg,
        sorted([cfg["checkpoint"], cfg["corpus"], *spectra_paths]), [csv_path],
    )
    return 0


# -- ndppl ------------------------------------------------------------------

_NDPPL_DEFAULTS = {
    "grid": None,
    "out": None,
}


def cmd_ndppl(cfg: dict) -> int:
    grid = metrics.load_ppl_grid(cfg["grid"])
    report = metrics.nd_ppl(grid)
    out_dir = cfg["out"]
    os.makedirs(out_dir, exist_ok=True)
    json_path = os.path.join(out_dir, "ndppl_report.json")
    payload = {
        "nd_ppl_key": report.nd_ppl_key,
        "nd_ppl_value": report.nd_ppl_value,
        "pair_count_key": report.pair_count_key,
        "pair_count_value": report.pair_count_value,
    }
    with open(json_path, "w") as fh:
        fh.write(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    _log(
        f"nd-ppl key {report.nd_ppl_key:.6f} "
        f"({report.pair_count_key} pairs), value {report.nd_ppl_value:.6f} "
        f"({report.pair_count_value} pairs)"
    )
    _emit_manifest(out_dir, "ndppl", cfg, [cfg["grid"]], [json_path])
    return 0


# -- argument plumbing -------------------------------------------------------


def _add_common(sub):
    sub.add_argument("--config", help="JSON config file; flags override it")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvcore",
        description="Streaming rank analysis and optimal low-rank "
        "compression of transformer KV caches",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    g = subs.add_parser("gen-synthetic", help="generate model, corpus and streams")
    _add_common(g)
    g.add_argument("--out")
    g.add_argument("--seed", type=int)
    for name in ("d-e", "n-layers", "m-h", "m-g", "d-h", "vocab", "d-ff",
                 "n-seqs", "seq-len", "order", "train-steps"):
        g.add_argument(f"--{name}", type=int, dest=name.replace("-", "_"))
    g.add_argument("--concentration", type=float)
    g.add_argument("--lr", type=float)

    a = subs.add_parser("analyze", help="streaming spectra + NER per (layer, kind)")
    _add_common(a)
    a.add_argument("--streams")
    a.add_argument("--out")
    a.add_argument("--batch-size", type=int, dest="batch_size")
    a.add_argument("--rank-tol", type=float, dest="rank_tol")
    a.add_argument("--threads", type=int)
    a.add_argument("--sigma-top", type=int, dest="sigma_top")

    c = subs.add_parser("compress", help="build factor files + error report")
    _add_common(c)
    c.add_argument("--spectra")
    c.add_argument("--checkpoint")
    c.add_argument("--streams")
    c.add_argument("--out")
    c.add_argument("--ratios")

    p = subs.add_parser("pplgrid", help="perplexity over a ratio grid")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--spectra")
    p.add_argument("--out")
    p.add_argument("--key-ratios", dest="key_ratios")
    p.add_argument("--value-ratios", dest="value_ratios")
    p.add_argument("--seq-len", type=int, dest="seq_len")

    n = subs.add_parser("ndppl", help="score a perplexity grid")
    _add_common(n)
    n.add_argument("--grid")
    n.add_argument("--out")
    return parser


_COMMANDS = {
    "gen-synthetic": (_GEN_DEFAULTS, cmd_gen_synthetic),
    "analyze": (_ANALYZE_DEFAULTS, cmd_analyze),
    "compress": (_COMPRESS_DEFAULTS, cmd_compress),
    "pplgrid": (_PPLGRID_DEFAULTS, cmd_pplgrid),
    "ndppl": (_NDPPL_DEFAULTS, cmd_ndppl),
}


def main(argv=None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    config_path = args.pop("config", None)
    defaults, runner = _COMMANDS[command]
    try:
        cfg = _resolve_config(defaults, config_path, args)
        return runner(cfg)
    except FormatError as exc:
        _log(f"input format error: {exc}")
        return EXIT_FORMAT
    except ShapeError as exc:
        _log(f"input mismatch: {exc}")
        return EXIT_FORMAT
    except NumericalError as exc:
        _log(f"numerical failure: {exc}")
        return EXIT_NUMERICAL
    except (ValueError, KeyError, OSError) as exc:
        _log(f"error: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

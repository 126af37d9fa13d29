"""Hook a pretrained causal LM and capture pre-RoPE key/value projections.

Supported architectures expose per-layer ``k_proj`` / ``v_proj`` linear
modules (Llama, Mistral, Qwen2, Gemma and friends); their outputs are the
raw x W^K / x W^V rows before any rotary embedding is applied, which is
exactly what the analysis toolkit expects. Models that fuse the qkv
projection into one matrix (GPT-2's c_attn, NeoX's query_key_value) have
no safe pre-rotation capture point, so extraction refuses them by name
instead of silently recording rotated keys.
"""

from __future__ import annotations

import glob
import json
import os
import re
from dataclasses import dataclass, field

from . import kvcr

_LAYER_INDEX_RE = re.compile(r"\.(\d+)\.")
_FUSED_HINTS = ("c_attn", "query_key_value", "qkv_proj", "in_proj")


@dataclass
class ExtractionSpec:
    """What to extract: which model, which data, how many tokens."""

    model: str
    data: str
    max_tokens: int
    out_dir: str
    window: int = 128
    dtype: str = "f32"

    def validate(self) -> None:
        if self.max_tokens < 1:
            raise ValueError(
                f"max_tokens must be >= 1, got {self.max_tokens}"
            )
        if self.dtype != "f32":
            raise ValueError(f"only the f32 dtype policy is supported, got {self.dtype}")
        if self.window < 2:
            raise ValueError(f"window must be >= 2, got {self.window}")


@dataclass
class ExtractionResult:
    manifest_path: str
    stream_paths: list = field(default_factory=list)
    tokens_captured: int = 0
    feature_dim: int = 0
    n_layers: int = 0


def _find_hook_points(model):
    """Locate per-layer (k_proj, v_proj) Linear pairs, ordered by layer.

    Raises a named error listing candidate linear modules when the
    architecture has no un-fused pre-rotation projection to hook.
    """
    import torch.nn as nn

    points = {}
    for name, module in model.named_modules():
        if not isinstance(module, nn.Linear):
            continue
        leaf = name.rsplit(".", 1)[-1]
        if leaf not in ("k_proj", "v_proj"):
            continue
        m = _LAYER_INDEX_RE.search(name + ".")
        if m is None:
            continue
        layer = int(m.group(1))
        kind = kvcr.KIND_KEY if leaf == "k_proj" else kvcr.KIND_VALUE
        points[(layer, kind)] = module
    layers = sorted({layer for layer, _ in points})
    complete = [
        layer
        for layer in layers
        if (layer, kvcr.KIND_KEY) in points and (layer, kvcr.KIND_VALUE) in points
    ]
    if not complete or complete != list(range(len(complete))):
        # candidates: leaf modules carrying a 2-D weight (covers nn.Linear
        # and transformers' Conv1D used by GPT-2 style fused projections)
        candidates = [
            name
            for name, m in model.named_modules()
            if not list(m.children())
            and getattr(getattr(m, "weight", None), "ndim", 0) == 2
        ]
        fused = [n for n in candidates if n.rsplit(".", 1)[-1] in _FUSED_HINTS]
        hint = (
            f" (fused qkv projections found: {fused[:4]}; pre-rotation capture "
            "is unavailable for fused kernels)"
            if fused
            else ""
        )
        raise ValueError(
            "hook-point not found: no per-layer k_proj/v_proj pair; "
            f"candidate modules: {candidates[:12]}{hint}"
        )
    widths = {points[(layer, k)].out_features for layer in complete for k in (0, 1)}
    if len(widths) != 1:
        raise ValueError(f"kv projection widths differ across layers: {sorted(widths)}")
    return points, len(complete), widths.pop()


def _iter_token_windows(spec: ExtractionSpec, tokenizer):
    """Yield (1, window) token tensors until the data runs out."""
    import torch

    if os.path.exists(spec.data):
        if os.path.isdir(spec.data):
            files = sorted(glob.glob(os.path.join(spec.data, "*.txt")))
            if not files:
                raise ValueError(f"{spec.data}: no .txt files to extract from")
        else:
            files = [spec.data]
        texts = (open(f, encoding="utf-8").read() for f in files)
    elif os.path.isabs(spec.data) or spec.data.endswith(".txt"):
        raise ValueError(f"{spec.data}: dataset file does not exist")
    else:
        texts = _hub_texts(spec.data)

    buf = []
    for text in texts:
        if not text:
            continue
        buf.extend(tokenizer(text, add_special_tokens=False)["input_ids"])
        while len(buf) >= spec.window:
            yield torch.tensor([buf[: spec.window]], dtype=torch.long)
            buf = buf[spec.window :]
    if buf:
        yield torch.tensor([buf], dtype=torch.long)


def _hub_texts(name: str):
    split = "train"
    if ":" in name:
        name, split = name.rsplit(":", 1)
    try:
        from datasets import load_dataset
    except ImportError:
        raise ValueError(
            f"dataset source {name!r} is not a local path and the 'datasets' "
            "package is not installed"
        )
    try:
        ds = load_dataset(name, split=split, streaming=True)
    except Exception as exc:
        raise ValueError(
            f"dataset source {name!r} is neither a local path nor a loadable "
            f"hub dataset: {exc}"
        )
    for record in ds:
        text = record.get("text") or record.get("content")
        if text:
            yield text


def extract(spec: ExtractionSpec) -> ExtractionResult:
    """Run the dataset through the model and write one KVCR stream per
    (layer, kind), stopping at the token budget."""
    spec.validate()
    os.makedirs(spec.out_dir, exist_ok=True)

    import torch
    from transformers import AutoModelForCausalLM, AutoTokenizer

    tokenizer = AutoTokenizer.from_pretrained(spec.model)
    model = AutoModelForCausalLM.from_pretrained(spec.model)
    model.eval()

    points, n_layers, feature_dim = _find_hook_points(model)

    writers = {
        key: kvcr.StreamWriter(
            os.path.join(spec.out_dir, kvcr.stream_filename(*key)),
            layer_index=key[0],
            feature_dim=feature_dim,
            kind=key[1],
        )
        for key in points
    }
    captured = 0
    pending: dict = {}

    def make_hook(key):
        def hook(_module, _inputs, output):
            pending[key] = output.detach().to(torch.float32).reshape(-1, feature_dim)

        return hook

    handles = [module.register_forward_hook(make_hook(key)) for key, module in points.items()]
    try:
        with torch.no_grad():
            for window in _iter_token_windows(spec, tokenizer):
                if captured >= spec.max_tokens:
                    break
                take = min(window.shape[1], spec.max_tokens - captured)
                model(input_ids=window)
                for key, writer in writers.items():
                    rows = pending.pop(key)
                    writer.append(rows[:take].numpy())
                captured += take
    finally:
        for handle in handles:
            handle.remove()
        for writer in writers.values():
            writer.close()
    if captured == 0:
        for writer in writers.values():
            os.unlink(writer.path)
        raise ValueError(f"dataset {spec.data!r} produced no tokens")

    manifest = {
        "model": spec.model,
        "data": spec.data,
        "feature_dim": feature_dim,
        "n_layers": n_layers,
        "tokens_captured": captured,
        "max_tokens": spec.max_tokens,
        "capture_point": "k_proj/v_proj output (pre-rotation)",
        "files": {
            os.path.basename(w.path): w.rows_written for w in writers.values()
        },
    }
    manifest_path = os.path.join(spec.out_dir, "extraction_manifest.json")
    with open(manifest_path, "w") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return ExtractionResult(
        manifest_path=manifest_path,
        stream_paths=sorted(w.path for w in writers.values()),
        tokens_captured=captured,
        feature_dim=feature_dim,
        n_layers=n_layers,
    )


def validate(out_dir) -> list:
    """Re-parse every stream file in a directory; returns per-file records
    and raises nothing, so all problems are listed at once."""
    paths = sorted(glob.glob(os.path.join(os.fspath(out_dir), "*.kvcr")))
    if not paths:
        raise ValueError(f"{out_dir}: no .kvcr files to validate")
    report = []
    for path in paths:
        try:
            header, _ = kvcr.read_stream(path)
            report.append(
                {
                    "file": os.path.basename(path),
                    "ok": True,
                    "layer": header.layer_index,
                    "kind": kvcr.KIND_LABELS[header.kind],
                    "tokens": header.token_count,
                    "feature_dim": header.feature_dim,
                }
            )
        except ValueError as exc:
            report.append(
                {"file": os.path.basename(path), "ok": False, "error": str(exc)}
            )
    return report

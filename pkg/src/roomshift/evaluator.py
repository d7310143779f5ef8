"""Siamese acoustic-space scorer.

A small CNN maps a log-spectrogram to a 128-dim embedding; a two-layer head
on the signed difference of two embeddings classifies same-space (0) vs
different-space (1). Because the subtraction is signed, score_pair(a, b)
and score_pair(b, a) can differ; reports carry both orders.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .dsp import MODEL_FRAMES, StftConfig, stft_from_dict, stft_to_dict
from .errors import DataError
from .fileio import atomic_write_json, read_json
from .seeding import child_rng
from .tensor_nn import (
    Conv2d,
    Linear,
    Tensor,
    apply_params,
    dropout,
    global_avg_pool,
    load_checkpoint,
    model_manifest_path,
    no_grad,
    relu,
    save_checkpoint,
    softmax,
)


@dataclass(frozen=True)
class EvaluatorHyper:
    embed_dim: int = 128
    head_hidden: int = 256
    frames: int = MODEL_FRAMES
    dropout: float = 0.1
    seed: int = 0


class EvaluatorModel:
    CHANNELS = (16, 32, 64, 128)

    def __init__(self, hyper=EvaluatorHyper(), stft_config=StftConfig()):
        self.hyper = hyper
        self.stft_config = stft_config
        rng = child_rng(hyper.seed, "init")
        self.blocks = []
        c_in = 1
        for c_out in self.CHANNELS:
            self.blocks.append(Conv2d(c_in, c_out, kernel=3, stride=2, padding=1, rng=rng))
            c_in = c_out
        self.embed_proj = Linear(c_in, hyper.embed_dim, rng)
        self.head_hidden = Linear(hyper.embed_dim, hyper.head_hidden, rng)
        self.head_out = Linear(hyper.head_hidden, 2, rng)

    def named_params(self):
        out = {}
        for i, block in enumerate(self.blocks):
            out.update(block.params(f"cnn.block{i}"))
        out.update(self.embed_proj.params("cnn.embed"))
        out.update(self.head_hidden.params("head.hidden"))
        out.update(self.head_out.params("head.out"))
        return out

    def _normalize(self, grids):
        # log grids sit near ln(log_floor)/2 with a spread of a few nats; the
        # norm-free conv stack only trains if that DC offset is removed
        center = 0.5 * np.log(self.stft_config.log_floor)
        return (grids - np.float32(center)) / np.float32(-0.5 * center)

    def embed_batch(self, grids, rng=None, train=False):
        """float32 (N, bins, frames) grids -> (N, embed_dim) Tensor."""
        x = Tensor(self._normalize(grids)[:, None, :, :])
        for block in self.blocks:
            x = relu(block(x))
        rate = self.hyper.dropout if train else 0.0
        emb = self.embed_proj(global_avg_pool(x))
        return dropout(emb, rate, rng, train)

    def logits_batch(self, grids1, grids2, rng=None, train=False):
        """Head applied to the signed embedding difference; (N, 2) logits."""
        diff = self.embed_batch(grids1, rng, train) - self.embed_batch(grids2, rng, train)
        rate = self.hyper.dropout if train else 0.0
        hidden = dropout(relu(self.head_hidden(diff)), rate, rng, train)
        return self.head_out(hidden)

    def _check(self, spec):
        want = (self.stft_config.bins, self.hyper.frames)
        if spec.shape != want:
            raise ValueError(f"expected {want} grid, got {spec.shape}")

    def embed(self, spec):
        self._check(spec)
        with no_grad():
            emb = self.embed_batch(spec.grid.astype(np.float32)[None])
        return emb.data[0]

    def score_pair(self, spec1, spec2):
        """P(different space), i.e. softmax of head(embed1 - embed2) at index 1."""
        self._check(spec1)
        self._check(spec2)
        with no_grad():
            logits = self.logits_batch(
                spec1.grid.astype(np.float32)[None], spec2.grid.astype(np.float32)[None]
            )
            probs = softmax(logits, axis=-1)
        return float(probs.data[0, 1])


def save_evaluator(model, path, state=None):
    manifest = {"kind": "evaluator", "version": 1, "hyper": asdict(model.hyper), "stft": stft_to_dict(model.stft_config)}
    atomic_write_json(model_manifest_path(path), manifest)
    save_checkpoint(path, {k: p.data for k, p in model.named_params().items()}, state or {})


def load_evaluator(path):
    manifest = read_json(model_manifest_path(path))
    if manifest.get("kind") != "evaluator":
        raise DataError(f"{path}: manifest kind {manifest.get('kind')!r} is not an evaluator")
    model = EvaluatorModel(EvaluatorHyper(**manifest["hyper"]), stft_from_dict(manifest["stft"]))
    params, _ = load_checkpoint(path)
    apply_params(model.named_params(), params, path)
    return model


def _batch_scores(evaluator, grids_a, grids_b):
    with no_grad():
        probs = softmax(evaluator.logits_batch(grids_a, grids_b), axis=-1)
    return probs.data[:, 1]


def evaluate_transfer(transfer_model, evaluator, examples, hashes=None, batch=8):
    """Score how much closer each prediction moved to its conditioning space.

    before = score_pair(input, cond); after = score_pair(predicted, cond);
    the reversed argument order is reported alongside because the head is
    signed. Returns a JSON-ready report with per-example scores and means.
    """
    examples = list(examples)
    if not examples:
        raise ValueError("evaluate_transfer needs a non-empty example set")
    per_example = []
    sums = {"before": 0.0, "after": 0.0, "before_reversed": 0.0, "after_reversed": 0.0}
    for start in range(0, len(examples), batch):
        chunk = examples[start : start + batch]
        inputs = np.stack([ex.input_spec.grid for ex in chunk]).astype(np.float32)
        conds = np.stack([ex.cond_spec.grid for ex in chunk]).astype(np.float32)
        with no_grad():
            residual = transfer_model.forward_batch(inputs, conds)
            predicted = inputs + residual.data.transpose(0, 2, 1)
        scores = {
            "before": _batch_scores(evaluator, inputs, conds),
            "after": _batch_scores(evaluator, predicted, conds),
            "before_reversed": _batch_scores(evaluator, conds, inputs),
            "after_reversed": _batch_scores(evaluator, conds, predicted),
        }
        for i, ex in enumerate(chunk):
            row = {"index": start + i, "ids": list(ex.ids)}
            for key, vals in scores.items():
                row[key] = float(vals[i])
                sums[key] += float(vals[i])
            per_example.append(row)
    n = len(examples)
    report = {
        "count": n,
        "mean_before": sums["before"] / n,
        "mean_after": sums["after"] / n,
        "mean_before_reversed": sums["before_reversed"] / n,
        "mean_after_reversed": sums["after_reversed"] / n,
        "examples": per_example,
    }
    if hashes:
        report["hashes"] = dict(hashes)
    return report

"""Acoustic-space transfer network.

A small CNN summarizes the conditioning recording into a 257-dim acoustic
signature; a 3-layer pre-norm transformer reads 300 spectrogram frames plus
that signature as token 0 and emits a residual which, added to the input
log-spectrogram, yields the prediction in the target space.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .audio_io import AudioClip
from .dsp import (
    MODEL_FRAMES,
    LogSpectrogram,
    StftConfig,
    fixed_log_spectrogram,
    griffin_lim,
    stft_from_dict,
    stft_to_dict,
)
from .errors import DataError
from .fileio import atomic_write_json, read_json
from .seeding import child_rng
from .tensor_nn import (
    Conv2d,
    LayerNorm,
    Linear,
    Tensor,
    TransformerLayer,
    apply_params,
    concat,
    constant,
    global_avg_pool,
    load_checkpoint,
    model_manifest_path,
    no_grad,
    relu,
    reshape,
    save_checkpoint,
    sinusoidal_positions,
    slice_axis,
    transpose,
)


DEFAULT_CHUNK_SECONDS = 3.0


@dataclass(frozen=True)
class TransferHyper:
    model_dim: int = 257
    frames: int = MODEL_FRAMES
    layers: int = 3
    heads: int = 8
    head_dim: int = 32
    ff_hidden: int = 512
    dropout: float = 0.1
    seed: int = 0


class SignatureEncoder:
    """Conditioning spectrogram -> 257-dim acoustic signature.

    Four 3x3 stride-2 ReLU conv blocks (16-32-64-128 channels), a 1x1 conv
    up to model_dim, then global average pooling.
    """

    CHANNELS = (16, 32, 64, 128)

    def __init__(self, model_dim, rng, dtype=np.float32):
        self.blocks = []
        c_in = 1
        for c_out in self.CHANNELS:
            self.blocks.append(Conv2d(c_in, c_out, kernel=3, stride=2, padding=1, rng=rng, dtype=dtype))
            c_in = c_out
        self.proj = Conv2d(c_in, model_dim, kernel=1, stride=1, padding=0, rng=rng, dtype=dtype)

    def __call__(self, x):
        for block in self.blocks:
            x = relu(block(x))
        return global_avg_pool(self.proj(x))

    def params(self, prefix):
        out = {}
        for i, block in enumerate(self.blocks):
            out.update(block.params(f"{prefix}.block{i}"))
        out.update(self.proj.params(f"{prefix}.proj"))
        return out


class ResidualTransformer:
    """300 content tokens + signature token -> 300 residual tokens."""

    def __init__(self, hyper, rng, dtype=np.float32):
        self.hyper = hyper
        self.positions = sinusoidal_positions(hyper.frames, hyper.model_dim, dtype)
        self.layers = [
            TransformerLayer(hyper.model_dim, hyper.heads, hyper.head_dim, hyper.ff_hidden, rng, dtype)
            for _ in range(hyper.layers)
        ]
        self.ln_final = LayerNorm(hyper.model_dim, dtype)
        self.head = Linear(hyper.model_dim, hyper.model_dim, rng, dtype)

    def assemble_tokens(self, content_tokens, embedding):
        """(N, frames, dim) content + (N, dim) signature -> (N, frames+1, dim).

        Positional encodings go on the content tokens only; the signature
        token is a set-member summary, not a sequence element.
        """
        n, frames, dim = content_tokens.data.shape
        if frames != self.hyper.frames or dim != self.hyper.model_dim:
            raise ValueError(f"expected (*, {self.hyper.frames}, {self.hyper.model_dim}) tokens, got {content_tokens.data.shape}")
        positioned = content_tokens + constant(self.positions[None, :, :])
        cond_token = reshape(embedding, (n, 1, dim))
        return concat([cond_token, positioned], axis=1)

    def __call__(self, content_tokens, embedding, rate=0.0, rng=None, train=False):
        x = self.assemble_tokens(content_tokens, embedding)
        for layer in self.layers:
            x = layer(x, rate, rng, train)
        residual = self.head(self.ln_final(x))
        return slice_axis(residual, 1, 1, self.hyper.frames + 1)

    def params(self, prefix):
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.params(f"{prefix}.layer{i}"))
        out.update(self.ln_final.params(f"{prefix}.ln_final"))
        out.update(self.head.params(f"{prefix}.head"))
        return out


class TransferModel:
    def __init__(self, hyper=TransferHyper(), stft_config=StftConfig()):
        if stft_config.bins != hyper.model_dim:
            raise ValueError(f"model_dim {hyper.model_dim} must equal spectrogram bins {stft_config.bins}")
        self.hyper = hyper
        self.stft_config = stft_config
        rng = child_rng(hyper.seed, "init")
        self.encoder = SignatureEncoder(hyper.model_dim, rng)
        self.transformer = ResidualTransformer(hyper, rng)

    def named_params(self):
        return {**self.encoder.params("enc"), **self.transformer.params("tr")}

    def forward_batch(self, input_grids, cond_grids, rng=None, train=False):
        """float32 (N, bins, frames) grids -> residual Tensor (N, frames, bins)."""
        conds = Tensor(cond_grids[:, None, :, :])
        embedding = self.encoder(conds)
        content = transpose(Tensor(input_grids), (0, 2, 1))
        rate = self.hyper.dropout if train else 0.0
        return self.transformer(content, embedding, rate, rng, train)

    def _check_spec(self, spec):
        if spec.shape != (self.hyper.model_dim, self.hyper.frames):
            raise ValueError(f"expected {(self.hyper.model_dim, self.hyper.frames)} grid, got {spec.shape}")

    def encode_signature(self, cond):
        self._check_spec(cond)
        with no_grad():
            emb = self.encoder(Tensor(cond.grid.astype(np.float32)[None, None, :, :]))
        return emb.data[0]

    def generate_residual(self, input_spec, embedding):
        self._check_spec(input_spec)
        with no_grad():
            content = transpose(Tensor(input_spec.grid.astype(np.float32)[None, :, :]), (0, 2, 1))
            tokens = self.transformer(content, Tensor(np.asarray(embedding, dtype=np.float32)[None, :]))
        return tokens.data[0].T

    def transfer_parts(self, input_spec, cond):
        """(predicted, residual) float32 grids; predicted = input + residual in float32."""
        residual = self.generate_residual(input_spec, self.encode_signature(cond))
        predicted = input_spec.grid.astype(np.float32) + residual
        return predicted, residual

    def transfer(self, input_spec, cond):
        predicted, _ = self.transfer_parts(input_spec, cond)
        return LogSpectrogram(predicted, input_spec.config)


@dataclass
class TransferRender:
    clip: AudioClip
    input_spec: LogSpectrogram  # fixed-framed float32 view of the input
    predicted_spec: LogSpectrogram  # input_spec + residual_spec, float32 entrywise
    residual_spec: LogSpectrogram
    convergence: np.ndarray  # Griffin-Lim error per iteration


def transfer_waveform(x, cond, model, gl_iterations=60):
    """Re-render clip x into cond's space: chunk, transfer, Griffin-Lim.

    x is split into non-overlapping 3 s windows (final window zero-padded),
    each transferred against the one conditioning spectrogram; the predicted
    grids are concatenated along time and resynthesized in a single
    Griffin-Lim pass, then trimmed to the input length.
    """
    cfg = model.stft_config
    chunk = int(round(DEFAULT_CHUNK_SECONDS * cfg.sample_rate))
    for name, clip in (("input", x), ("conditioning", cond)):
        if clip.sample_rate != cfg.sample_rate:
            raise DataError(f"{name} clip rate {clip.sample_rate} != model rate {cfg.sample_rate}")
        if len(clip.samples) < chunk:
            raise DataError(f"{name} clip shorter than {DEFAULT_CHUNK_SECONDS} s")
    cond_spec = fixed_log_spectrogram(cond, cfg, model.hyper.frames)
    embedding = model.encode_signature(cond_spec)
    inputs, predictions, residuals = [], [], []
    for start in range(0, len(x.samples), chunk):
        piece = AudioClip(x.samples[start : start + chunk], x.sample_rate)
        spec = fixed_log_spectrogram(piece, cfg, model.hyper.frames)
        residual = model.generate_residual(spec, embedding)
        grid32 = spec.grid.astype(np.float32)
        inputs.append(grid32)
        residuals.append(residual)
        predictions.append(grid32 + residual)
    predicted = LogSpectrogram(np.concatenate(predictions, axis=1), cfg)
    result = griffin_lim(predicted, iterations=gl_iterations)
    return TransferRender(
        clip=AudioClip(result.clip.samples[: len(x.samples)], cfg.sample_rate),
        input_spec=LogSpectrogram(np.concatenate(inputs, axis=1), cfg),
        predicted_spec=predicted,
        residual_spec=LogSpectrogram(np.concatenate(residuals, axis=1), cfg),
        convergence=result.convergence,
    )


def save_transfer_model(model, path, state=None):
    manifest = {"kind": "transfer", "version": 1, "hyper": asdict(model.hyper), "stft": stft_to_dict(model.stft_config)}
    atomic_write_json(model_manifest_path(path), manifest)
    save_checkpoint(path, {k: p.data for k, p in model.named_params().items()}, state or {})


def load_transfer_model(path):
    manifest = read_json(model_manifest_path(path))
    if manifest.get("kind") != "transfer":
        raise DataError(f"{path}: manifest kind {manifest.get('kind')!r} is not a transfer model")
    model = TransferModel(TransferHyper(**manifest["hyper"]), stft_from_dict(manifest["stft"]))
    params, _ = load_checkpoint(path)
    apply_params(model.named_params(), params, path)
    return model

"""Training/evaluation example construction.

Transfer triplets (input/conditioning/target log-spectrograms) and siamese
pairs are built from a dry-signal corpus convolved with synthetic room
impulse responses. Every example derives its own child seed from the master
seed and example index, so serial and parallel builds agree bit-for-bit.
"""

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .audio_io import AudioClip, random_gain, read_wav, write_wav
from .dsp import MODEL_FRAMES, LogSpectrogram, StftConfig, convolve, fixed_log_spectrogram, read_spec1, write_spec1
from .errors import DataError, ManifestError
from .rir import RoomIr, image_source_rir, sample_room, save_rir
from .seeding import child_rng
from .synth import DEFAULT_DURATION, draw_recipe

MANIFEST_NAME = "manifest.jsonl"
MANIFEST_VERSION = 1
DEFAULT_ROOMS = 24
DEFAULT_TRANSFER = 2000
DEFAULT_PAIRS = 4000
DEFAULT_CORPUS = 40
DRY_SECONDS = 30.0
SPLIT_FRACTIONS = {"train": 0.75, "val": 0.125, "test": 0.125}
SPLITS = ("train", "val", "test")


@dataclass
class TransferExample:
    input_spec: LogSpectrogram  # dry content a through room i
    cond_spec: LogSpectrogram  # dry content b through room j
    target_spec: LogSpectrogram  # the SAME patch of a through room j
    ids: tuple  # (audio_a, audio_b, rir_i, rir_j)

    def __post_init__(self):
        a, b, ri, rj = self.ids
        if a == b:
            raise ValueError(f"input and conditioning content must differ, both {a!r}")
        if ri == rj:
            raise ValueError(f"source and target rooms must differ, both {ri!r}")


@dataclass
class PairExample:
    spec1: LogSpectrogram
    spec2: LogSpectrogram
    label: int  # 0 = same acoustic space, 1 = different

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


@dataclass(frozen=True)
class AugmentParams:
    volume_prob: float = 0.5
    flip_prob: float = 0.5
    cutout_prob: float = 0.5
    jitter_prob: float = 0.5
    volume_lo: float = math.log(0.1)
    volume_hi: float = 0.0
    cutout_bin_frac: float = 0.2
    cutout_frame_frac: float = 0.2
    jitter_sigma: float = 0.1

    @staticmethod
    def disabled():
        return AugmentParams(volume_prob=0.0, flip_prob=0.0, cutout_prob=0.0, jitter_prob=0.0)


def random_patch(clip, duration, rng):
    """Uniformly positioned contiguous patch of exactly duration*fs samples."""
    need = int(round(duration * clip.sample_rate))
    if len(clip.samples) < need:
        raise ValueError(f"clip of {len(clip.samples)} samples shorter than patch of {need}")
    offset = int(rng.integers(0, len(clip.samples) - need + 1))
    return AudioClip(clip.samples[offset : offset + need], clip.sample_rate)


def augment_spectrogram(spec, rng, params=AugmentParams()):
    """Stochastic log-domain augmentation, each stage firing independently.

    Stages: additive volume constant ~ U[ln 0.1, 0]; time-axis flip;
    Gaussian jitter; rectangular cutout filled with ln(log_floor).
    After volume/jitter the grid is re-floored at ln(log_floor), so the
    floor stays structural and nothing drifts below it.
    """
    grid = spec.grid.copy()
    floor = math.log(spec.config.log_floor)
    shifted = False
    if params.volume_prob > 0 and rng.random() < params.volume_prob:
        grid += rng.uniform(params.volume_lo, params.volume_hi)
        shifted = True
    if params.flip_prob > 0 and rng.random() < params.flip_prob:
        grid = grid[:, ::-1].copy()
    if params.jitter_prob > 0 and rng.random() < params.jitter_prob:
        grid += rng.normal(0.0, params.jitter_sigma, size=grid.shape)
        shifted = True
    if shifted:
        np.maximum(grid, floor, out=grid)
    if params.cutout_prob > 0 and rng.random() < params.cutout_prob:
        bins, frames = grid.shape
        max_h = max(1, int(params.cutout_bin_frac * bins))
        max_w = max(1, int(params.cutout_frame_frac * frames))
        h = int(rng.integers(1, max_h + 1))
        w = int(rng.integers(1, max_w + 1))
        top = int(rng.integers(0, bins - h + 1))
        left = int(rng.integers(0, frames - w + 1))
        grid[top : top + h, left : left + w] = floor
    return LogSpectrogram(grid, spec.config)


def _wet_spectrogram(patch, ir, rng, cfg):
    wet = random_gain(convolve(patch, ir.clip), rng)
    return fixed_log_spectrogram(wet, cfg)


def build_transfer_example(audio_a, audio_b, rir_i, rir_j, rng, ids, duration=DEFAULT_DURATION, cfg=StftConfig()):
    """One transfer triplet: re-render the same dry patch through two rooms.

    input  = logmag(gain(patch_a * rir_i))
    target = logmag(gain(patch_a * rir_j))   # same patch, independent gain
    cond   = logmag(gain(patch_b * rir_j))
    """
    if ids[2] == ids[3]:
        raise ValueError(f"rir_i and rir_j must differ, both {ids[2]!r}")
    if ids[0] == ids[1]:
        raise ValueError(f"audio_a and audio_b must differ, both {ids[0]!r}")
    patch_a = random_patch(audio_a, duration, rng)
    patch_b = random_patch(audio_b, duration, rng)
    input_spec = _wet_spectrogram(patch_a, rir_i, rng, cfg)
    target_spec = _wet_spectrogram(patch_a, rir_j, rng, cfg)
    cond_spec = _wet_spectrogram(patch_b, rir_j, rng, cfg)
    return TransferExample(input_spec, cond_spec, target_spec, ids)


@dataclass(frozen=True)
class PairRecipe:
    label: int  # 0 same space, 1 different
    same_content: bool
    contents: tuple  # (c1, c2) pool indices
    rooms: tuple  # (r1, r2) pool indices


def _distinct_draw(n, first, rng):
    other = int(rng.integers(n - 1))
    return other + 1 if other >= first else other


def draw_pair_recipe(n_contents, n_rooms, rng):
    """Sample which contents/rooms a pair uses; the heavy audio work is separate.

    Fair label coin, then a fair content coin: positives share the RIR,
    negatives use two different RIRs, and each label is split between
    same-content and different-content pairs.
    """
    if n_contents < 2 or n_rooms < 2:
        raise ValueError(f"need >=2 contents and >=2 rooms, got {n_contents}, {n_rooms}")
    label = int(rng.integers(2))
    same_content = bool(rng.integers(2))
    c1 = int(rng.integers(n_contents))
    c2 = c1 if same_content else _distinct_draw(n_contents, c1, rng)
    r1 = int(rng.integers(n_rooms))
    r2 = r1 if label == 0 else _distinct_draw(n_rooms, r1, rng)
    return PairRecipe(label, same_content, (c1, c2), (r1, r2))


def build_pair_example(clips, rirs, rng, params=AugmentParams(), duration=DEFAULT_DURATION, cfg=StftConfig()):
    """One siamese pair per draw_pair_recipe, with independent gains and augmentation.

    Same-content pairs reuse the identical dry patch so the two sides
    differ only in what the label encodes (room, gain, augmentation).
    """
    recipe = draw_pair_recipe(len(clips), len(rirs), rng)
    patch1 = random_patch(clips[recipe.contents[0]], duration, rng)
    if recipe.same_content:
        patch2 = patch1
    else:
        patch2 = random_patch(clips[recipe.contents[1]], duration, rng)
    spec1 = augment_spectrogram(_wet_spectrogram(patch1, rirs[recipe.rooms[0]], rng, cfg), rng, params)
    spec2 = augment_spectrogram(_wet_spectrogram(patch2, rirs[recipe.rooms[1]], rng, cfg), rng, params)
    return PairExample(spec1, spec2, recipe.label)


# --- manifest ---------------------------------------------------------------
#
# Line 1 is a header record carrying the master seed and split membership;
# every following line is one example record with dataset-relative paths.


def write_manifest(dataset_dir, header, records):
    lines = [json.dumps({"kind": "header", **header}, sort_keys=True)]
    lines.extend(json.dumps(rec, sort_keys=True) for rec in records)
    from .fileio import atomic_write_bytes

    atomic_write_bytes(os.path.join(dataset_dir, MANIFEST_NAME), ("\n".join(lines) + "\n").encode())


def read_manifest(dataset_dir):
    """Parse manifest.jsonl -> (header dict, list of record dicts).

    Malformed lines raise ManifestError carrying the 1-based line number.
    """
    path = os.path.join(dataset_dir, MANIFEST_NAME)
    if not os.path.exists(path):
        raise DataError(f"no {MANIFEST_NAME} in {dataset_dir}")
    header = None
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON: {exc.msg}", lineno) from exc
            if not isinstance(rec, dict) or "kind" not in rec:
                raise ManifestError("record is not an object with a 'kind' field", lineno)
            if lineno == 1:
                if rec["kind"] != "header":
                    raise ManifestError("first line must be the header record", lineno)
                header = rec
            elif rec["kind"] == "header":
                raise ManifestError("duplicate header record", lineno)
            else:
                if rec["kind"] not in ("transfer", "pair"):
                    raise ManifestError(f"unknown record kind {rec['kind']!r}", lineno)
                records.append(rec)
    if header is None:
        raise ManifestError("empty manifest: missing header record", 1)
    return header, records


def manifest_records(dataset_dir, kind=None, split=None):
    """Convenience filter over read_manifest records."""
    header, records = read_manifest(dataset_dir)
    out = [r for r in records if (kind is None or r["kind"] == kind) and (split is None or r["split"] == split)]
    return header, out


def load_transfer_grids(dataset_dir, record):
    """Read the three SPEC1 grids of a transfer record as float64 arrays."""
    grids = []
    for key in ("input", "cond", "target"):
        grids.append(read_spec1(os.path.join(dataset_dir, record[key])).grid)
    return grids


def load_pair_grids(dataset_dir, record):
    a = read_spec1(os.path.join(dataset_dir, record["spec1"])).grid
    b = read_spec1(os.path.join(dataset_dir, record["spec2"])).grid
    return a, b


# --- corpus and full build --------------------------------------------------


def default_corpus(seed, count=DEFAULT_CORPUS, duration=DRY_SECONDS):
    """Render `count` synthetic dry clips, ids syn_0000..; one child seed each."""
    clips = {}
    for c in range(count):
        rng = child_rng(seed, "dry", c)
        recipe = draw_recipe(rng)
        clips[f"syn_{c:04d}"] = recipe.render(rng, duration=duration)
    return clips


def load_user_corpus(dry_dir, min_duration=DEFAULT_DURATION):
    """Load optional user WAVs as extra dry content, ids usr_<stem>."""
    clips = {}
    for name in sorted(os.listdir(dry_dir)):
        if not name.lower().endswith(".wav"):
            continue
        clip = read_wav(os.path.join(dry_dir, name))
        if clip.duration < min_duration:
            raise DataError(f"{name}: {clip.duration:.2f}s is shorter than a {min_duration}s patch")
        clips[f"usr_{os.path.splitext(name)[0]}"] = clip
    return clips


def _split_counts(total):
    train = int(round(total * SPLIT_FRACTIONS["train"]))
    val = int(round(total * SPLIT_FRACTIONS["val"]))
    val = max(val, 1) if total >= 3 else val
    test = total - train - val
    if min(train, val, test) < 1:
        raise ValueError(f"{total} items cannot cover three splits")
    return {"train": train, "val": val, "test": test}


def _assign_splits(ids, counts):
    out = {}
    cursor = 0
    for split in SPLITS:
        out[split] = list(ids[cursor : cursor + counts[split]])
        cursor += counts[split]
    return out


def build_dataset(
    out_dir,
    seed,
    n_rooms=DEFAULT_ROOMS,
    n_transfer=DEFAULT_TRANSFER,
    n_pairs=DEFAULT_PAIRS,
    dry_dir=None,
    corpus_size=DEFAULT_CORPUS,
    dry_seconds=DRY_SECONDS,
    cfg=StftConfig(),
    progress=None,
):
    """Build a complete on-disk dataset; the directory appears atomically.

    Layout: manifest.jsonl, dry/<id>.wav, rirs/<id>.wav(+json),
    specs/<example files>.spec. Rooms are drawn round-robin over the three
    size classes; rooms and contents are split disjointly across
    train/val/test before any example is drawn.
    """
    out_dir = os.fspath(out_dir)
    if os.path.exists(out_dir):
        raise DataError(f"output directory {out_dir} already exists")
    if n_rooms < 6:
        raise DataError(f"need at least 6 rooms to split three ways, got {n_rooms}")

    tmp_dir = out_dir.rstrip("/") + ".partial"
    if os.path.exists(tmp_dir):
        import shutil

        shutil.rmtree(tmp_dir)
    for sub in ("dry", "rirs", "specs"):
        os.makedirs(os.path.join(tmp_dir, sub))

    def note(msg):
        if progress is not None:
            progress(msg)

    # dry corpus
    note(f"rendering {corpus_size} synthetic dry clips")
    clips = default_corpus(seed, count=corpus_size, duration=dry_seconds)
    if dry_dir is not None:
        clips.update(load_user_corpus(dry_dir))
    content_ids = sorted(clips)
    if len(content_ids) < 6:
        raise DataError(f"need at least 6 dry clips to split three ways, got {len(content_ids)}")
    for cid in content_ids:
        write_wav(clips[cid], os.path.join(tmp_dir, "dry", cid + ".wav"))

    # rooms, round-robin over size classes so every split sees every class
    note(f"rendering {n_rooms} image-source rooms")
    classes = ("small", "medium", "large")
    rirs = {}
    for r in range(n_rooms):
        rng = child_rng(seed, "room", r)
        room = sample_room(rng, classes[r % len(classes)])
        rid = f"rir_{r:04d}"
        rirs[rid] = image_source_rir(room)
        save_rir(rirs[rid], os.path.join(tmp_dir, "rirs", rid + ".wav"))
    room_ids = sorted(rirs)

    content_splits = _assign_splits(content_ids, _split_counts(len(content_ids)))
    room_splits = _assign_splits(room_ids, _split_counts(len(room_ids)))

    # every example draws two distinct contents and two distinct rooms from
    # one split, so each split needs at least two of each (14 total suffices)
    if n_transfer or n_pairs:
        for what, splits in (("dry clips", content_splits), ("rooms", room_splits)):
            for split in SPLITS:
                if len(splits[split]) < 2:
                    raise DataError(
                        f"split {split!r} has {len(splits[split])} {what}; examples need "
                        f"two distinct {what} per split (14 or more in total)"
                    )

    transfer_counts = _split_counts(n_transfer) if n_transfer else {s: 0 for s in SPLITS}
    pair_counts = _split_counts(n_pairs) if n_pairs else {s: 0 for s in SPLITS}

    records = []
    index = 0
    for split in SPLITS:
        pool_c = content_splits[split]
        pool_r = room_splits[split]
        for _ in range(transfer_counts[split]):
            rng = child_rng(seed, "transfer", index)
            a = int(rng.integers(len(pool_c)))
            b = _distinct_draw(len(pool_c), a, rng)
            ri = int(rng.integers(len(pool_r)))
            rj = _distinct_draw(len(pool_r), ri, rng)
            ids = (pool_c[a], pool_c[b], pool_r[ri], pool_r[rj])
            ex = build_transfer_example(clips[ids[0]], clips[ids[1]], rirs[ids[2]], rirs[ids[3]], rng, ids, cfg=cfg)
            paths = {}
            for key, spec in (("input", ex.input_spec), ("cond", ex.cond_spec), ("target", ex.target_spec)):
                rel = f"specs/ex_{index:05d}_{key}.spec"
                write_spec1(spec, os.path.join(tmp_dir, rel))
                paths[key] = rel
            records.append({"kind": "transfer", "index": index, "split": split, "ids": list(ids), **paths})
            index += 1
            if index % 200 == 0:
                note(f"transfer examples: {index}")

    pair_index = 0
    for split in SPLITS:
        pool_c = content_splits[split]
        pool_r = room_splits[split]
        split_clips = [clips[c] for c in pool_c]
        split_rirs = [rirs[r] for r in pool_r]
        for _ in range(pair_counts[split]):
            rng = child_rng(seed, "pair", pair_index)
            ex = build_pair_example(split_clips, split_rirs, rng, cfg=cfg)
            rec = {"kind": "pair", "index": pair_index, "split": split, "label": ex.label}
            for key, spec in (("spec1", ex.spec1), ("spec2", ex.spec2)):
                rel = f"specs/pair_{pair_index:05d}_{key[-1]}.spec"
                write_spec1(spec, os.path.join(tmp_dir, rel))
                rec[key] = rel
            records.append(rec)
            pair_index += 1
            if pair_index % 400 == 0:
                note(f"pair examples: {pair_index}")

    header = {
        "version": MANIFEST_VERSION,
        "seed": int(seed),
        "sample_rate": cfg.sample_rate,
        "fft_size": cfg.fft_size,
        "hop": cfg.hop,
        "log_floor": cfg.log_floor,
        "frames": MODEL_FRAMES,
        "n_transfer": int(n_transfer),
        "n_pairs": int(n_pairs),
        "contents": content_splits,
        "rooms": room_splits,
    }
    write_manifest(tmp_dir, header, records)
    os.rename(tmp_dir, out_dir)
    note(f"dataset complete: {out_dir}")

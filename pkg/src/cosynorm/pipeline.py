"""Training loop, conversion in three duration modes, and evaluation.

The composite objective is L = L_cfm + lambda_ctc * L_ctc
+ lambda_dur * L_dur per batch item: the decoder regresses target-feature
velocities, the CTC head supervises encoder content, and the scalar flow
loss trains the duration predictor, all through one optimizer step.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Module, SGD, Tensor, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .ctc import ctc_feasible, ctc_greedy_decode, ctc_loss_op
from .datagen import (DatasetConfig, ManifestEntry, ToyWorld, read_features,
                      read_labels, read_manifest, speaker_cosine)
from .decoder import KEEP_ALL, DecoderConfig, SpeakerEmbedding, VelocityDecoder
from .duration import (DurationPredictor, DurationPredictorConfig, clamp_ratio,
                       duration_cfm_loss, predict_ratio)
from .encoder import EncoderConfig, SpeechEncoder
from .flow import (GuidanceWeights, SamplerConfig, cfm_loss, euler_sample,
                   sample_condition_mask)
from .seeding import derive_key, derive_rng

ABLATIONS = ("", "ctc", "speaker", "posscale")

DURATION_MC_DRAWS = 4


def _sub_config(cls, d: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class TrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    duration: DurationPredictorConfig = field(default_factory=DurationPredictorConfig)
    lambda_ctc: float = 0.5
    lambda_dur: float = 0.1
    learning_rate: float = 0.02
    momentum: float = 0.9
    n_steps: int = 8000
    batch_size: int = 8
    seed: int = 0
    p_uncond: float = 0.1
    p_content_drop: float = 0.1
    val_interval: int = 250
    n_val_items: int = 24
    ablate: str = ""

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = _sub_config(EncoderConfig, self.encoder)
        if isinstance(self.decoder, dict):
            self.decoder = _sub_config(DecoderConfig, self.decoder)
        if isinstance(self.duration, dict):
            self.duration = _sub_config(DurationPredictorConfig, self.duration)
        if self.lambda_ctc < 0 or self.lambda_dur < 0:
            raise ValueError("loss weights must be non-negative")
        if self.ablate not in ABLATIONS:
            raise ValueError(f"ablate must be one of {ABLATIONS}")
        if self.decoder.content_dim != self.encoder.model_dim:
            raise ValueError("decoder content_dim must match encoder model_dim")
        if self.duration.content_dim != self.encoder.model_dim:
            raise ValueError("duration content_dim must match encoder model_dim")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return _sub_config(TrainConfig, dict(d))


class ConversionModel(Module):
    """Encoder + velocity decoder + duration predictor behind one checkpoint."""

    def __init__(self, config: TrainConfig, dtype=np.float32):
        super().__init__()
        self.config = config
        self.dtype = dtype
        if config.ablate == "speaker":
            config.decoder.use_speaker = False
            config.duration.use_speaker = False
        if config.ablate == "posscale":
            config.decoder.use_position_scaling = False
        rng = derive_rng(config.seed, "init")
        self.encoder = self.add_child("encoder", SpeechEncoder(config.encoder, rng, dtype))
        self.decoder = self.add_child("decoder", VelocityDecoder(config.decoder, rng, dtype))
        self.duration = self.add_child("duration", DurationPredictor(config.duration, rng, dtype))

    def save(self, path) -> None:
        state = dict(self.state())
        ordered = {name: state[name] for name in sorted(state)}
        save_checkpoint(path, ordered)
        sidecar = Path(str(path) + ".json")
        sidecar.write_text(json.dumps(self.config.to_dict(), indent=2) + "\n", encoding="utf-8")

    @staticmethod
    def load(path, dtype=np.float32) -> "ConversionModel":
        sidecar = Path(str(path) + ".json")
        config = TrainConfig.from_dict(json.loads(sidecar.read_text(encoding="utf-8")))
        model = ConversionModel(config, dtype)
        model.load_state(load_checkpoint(path))
        return model


@dataclass
class TrainRow:
    utt_id: str
    source: np.ndarray
    target: np.ndarray
    labels: list
    speaker: SpeakerEmbedding
    true_ratio: float


def load_rows(dataset_dir, entries, world: ToyWorld, dtype=np.float32) -> list[TrainRow]:
    dataset_dir = Path(dataset_dir)
    rows = []
    for e in entries:
        src = read_features(dataset_dir / e.source_feature_file).astype(dtype)
        tgt = read_features(dataset_dir / e.target_feature_file).astype(dtype)
        labels = read_labels(dataset_dir / e.label_file)
        spk = SpeakerEmbedding(world.speaker_by_id(e.speaker_id).signature, e.speaker_id)
        rows.append(TrainRow(e.utt_id, src, tgt, labels, spk, len(tgt) / len(src)))
    return rows


@dataclass
class TrainResult:
    model: ConversionModel
    history: list
    final_val_cfm: float
    first_train_cfm: float
    last_train_cfm: float


def _val_cfm(model: ConversionModel, rows, seed: int) -> float:
    """Deterministic validation velocity loss: fixed (x0, t) draws per item,
    conditional branch only, so runs and ablations are comparable."""
    total = 0.0
    with no_grad():
        for row in rows:
            rng = derive_rng(seed, "valdraw", row.utt_id)
            content = model.encoder.encode(row.source)
            loss = cfm_loss(model.decoder, row.target, content, row.speaker, KEEP_ALL, rng)
            total += float(loss.data)
    return total / max(len(rows), 1)


def train(config: TrainConfig, dataset_dir, checkpoint_path=None,
          log=print) -> TrainResult:
    dataset_dir = Path(dataset_dir)
    world = ToyWorld(DatasetConfig.from_dict(
        json.loads((dataset_dir / "dataset.json").read_text(encoding="utf-8"))))
    entries = read_manifest(dataset_dir / "manifest.jsonl")
    train_rows = load_rows(dataset_dir, [e for e in entries if e.split == "train"], world)
    val_rows = load_rows(dataset_dir, [e for e in entries if e.split == "val"], world)
    val_rows = val_rows[: config.n_val_items]
    if not train_rows:
        raise ValueError("manifest has no train rows")

    lambda_ctc = 0.0 if config.ablate == "ctc" else config.lambda_ctc
    model = ConversionModel(config)
    params = model.parameters()
    opt = SGD(params, lr=config.learning_rate, momentum=config.momentum)
    batch_rng = derive_rng(config.seed, "batches")
    history = []
    first_train = math.nan
    last_train = math.nan

    for step in range(config.n_steps):
        idx = batch_rng.integers(0, len(train_rows), config.batch_size)
        losses = []
        cfm_vals = []
        for j, i in enumerate(sorted(int(k) for k in idx)):
            row = train_rows[i]
            item_rng = derive_rng(config.seed, "item", step, j)
            content = model.encoder.encode(row.source)
            mask = sample_condition_mask(item_rng, config.p_uncond, config.p_content_drop)
            loss = cfm_loss(model.decoder, row.target, content, row.speaker, mask, item_rng)
            cfm_vals.append(float(loss.data))
            if lambda_ctc > 0.0:
                if ctc_feasible(len(content), row.labels):
                    lattice = model.encoder.ctc_head(content)
                    loss = ad.add(loss, ad.mul(ctc_loss_op(lattice, row.labels), lambda_ctc))
                else:
                    log(f"step {step}: skipping infeasible CTC item {row.utt_id}")
            if config.lambda_dur > 0.0:
                # average several scalar-flow draws: same expected objective,
                # much lower variance for the tiny predictor
                draws = [duration_cfm_loss(model.duration, row.true_ratio, content,
                                           row.speaker, item_rng)
                         for _ in range(DURATION_MC_DRAWS)]
                dur = draws[0]
                for extra in draws[1:]:
                    dur = ad.add(dur, extra)
                loss = ad.add(loss, ad.mul(dur, config.lambda_dur / len(draws)))
            losses.append(loss)
        total = losses[0]
        for extra in losses[1:]:
            total = ad.add(total, extra)
        if len(losses) > 1:
            total = ad.mul(total, 1.0 / len(losses))
        value = float(total.data)
        if not math.isfinite(value):
            raise RuntimeError(f"non-finite loss at step {step}: {value}")
        if step == 0:
            first_train = float(np.mean(cfm_vals))
        last_train = float(np.mean(cfm_vals))
        opt.zero_grad()
        total.backward()
        opt.step()
        if config.val_interval and (step + 1) % config.val_interval == 0 and val_rows:
            v = _val_cfm(model, val_rows, config.seed)
            history.append({"step": step + 1, "val_cfm": v,
                            "train_loss": value})
            log(f"step {step + 1}: train {value:.4f}  val_cfm {v:.4f}")

    final_val = _val_cfm(model, val_rows, config.seed) if val_rows else math.nan
    if checkpoint_path is not None:
        model.save(checkpoint_path)
        Path(str(checkpoint_path) + ".log.json").write_text(
            json.dumps({"history": history, "final_val_cfm": final_val,
                        "first_train_cfm": first_train, "last_train_cfm": last_train},
                       indent=2) + "\n", encoding="utf-8")
    return TrainResult(model, history, final_val, first_train, last_train)


# -- conversion ----------------------------------------------------------------


@dataclass
class ConversionOutput:
    features: np.ndarray
    metadata: dict


def convert(model: ConversionModel, source: np.ndarray, speaker: SpeakerEmbedding,
            mode: str = "inherit", fixed_len: int | None = None,
            weights: GuidanceWeights | None = None,
            sampler: SamplerConfig | None = None) -> ConversionOutput:
    """Convert a source feature sequence to a native-style sequence with the
    requested total duration: inherited, predicted, or fixed."""
    weights = weights or GuidanceWeights()
    sampler = sampler or SamplerConfig()
    source = np.asarray(source, dtype=model.dtype)
    src_len = source.shape[0]
    with no_grad():
        content = model.encoder.encode(source)
        predicted = None
        if mode == "inherit":
            tgt_len = src_len
        elif mode == "predict":
            dur_sampler = SamplerConfig(sampler.n_steps, derive_key(sampler.seed, "ratio"))
            predicted = predict_ratio(model.duration, content, speaker, dur_sampler).value
            tgt_len = max(1, int(round(predicted * src_len)))
        elif mode == "fixed":
            if fixed_len is None or fixed_len < 1:
                raise ValueError("fixed mode requires fixed_len >= 1")
            tgt_len = int(fixed_len)
        else:
            raise ValueError(f"unknown duration mode: {mode}")
        feats = euler_sample(model.decoder, tgt_len, content, speaker, weights, sampler)
    meta = {
        "mode": mode,
        "source_len": src_len,
        "tgt_len": tgt_len,
        "ratio": tgt_len / src_len,
        "predicted_ratio": predicted,
        "seed": sampler.seed,
        "n_steps": sampler.n_steps,
        "w1": weights.w1,
        "w2": weights.w2,
    }
    return ConversionOutput(feats, meta)


# -- evaluation -------------------------------------------------------------------


def wer(ref, hyp) -> float:
    """Levenshtein distance over symbols divided by reference length."""
    ref = list(ref)
    hyp = list(hyp)
    if not ref:
        raise ValueError("WER is undefined for an empty reference")
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1] / len(ref)


@dataclass
class EvalReport:
    wer: float
    source_wer: float
    speaker_cos: float
    dur_ratio_mae: float
    mode: str
    rows: list

    def summary(self) -> str:
        lines = [
            f"{'metric':<18}{'value':>10}",
            f"{'converted WER':<18}{self.wer:>10.4f}",
            f"{'source WER':<18}{self.source_wer:>10.4f}",
            f"{'speaker cos':<18}{self.speaker_cos:>10.4f}",
            f"{'ratio MAE':<18}{self.dur_ratio_mae:>10.4f}",
            f"{'mode':<18}{self.mode:>10}",
            f"{'utterances':<18}{len(self.rows):>10d}",
        ]
        return "\n".join(lines)


def decode_labels(model: ConversionModel, features: np.ndarray) -> list[int]:
    with no_grad():
        content = model.encoder.encode(np.asarray(features, dtype=model.dtype))
        lattice = model.encoder.ctc_head(content)
    return ctc_greedy_decode(lattice.data)


def evaluate(model: ConversionModel, dataset_dir, split: str = "test",
             mode: str = "inherit", weights: GuidanceWeights | None = None,
             n_steps: int = 32, seed: int = 0,
             max_items: int | None = None) -> EvalReport:
    dataset_dir = Path(dataset_dir)
    world = ToyWorld(DatasetConfig.from_dict(
        json.loads((dataset_dir / "dataset.json").read_text(encoding="utf-8"))))
    entries = [e for e in read_manifest(dataset_dir / "manifest.jsonl") if e.split == split]
    if max_items is not None:
        entries = entries[:max_items]
    if not entries:
        raise ValueError(f"no rows to evaluate in split {split!r}")
    rows = []
    for e in entries:
        source = read_features(dataset_dir / e.source_feature_file)
        target = read_features(dataset_dir / e.target_feature_file)
        labels = read_labels(dataset_dir / e.label_file)
        speaker = SpeakerEmbedding(world.speaker_by_id(e.speaker_id).signature, e.speaker_id)
        sampler = SamplerConfig(n_steps, derive_key(seed, "convert", e.utt_id))
        out = convert(model, source, speaker, mode=mode, weights=weights, sampler=sampler)
        hyp = decode_labels(model, out.features)
        src_hyp = decode_labels(model, source)
        sig = world.extract_signature(out.features)
        true_ratio = len(target) / len(source)
        dur_sampler = SamplerConfig(n_steps, derive_key(seed, "ratio", e.utt_id))
        with no_grad():
            content = model.encoder.encode(np.asarray(source, dtype=model.dtype))
            pred_ratio = predict_ratio(model.duration, content, speaker, dur_sampler).value
        rows.append({
            "utt_id": e.utt_id,
            "wer": wer(labels, hyp),
            "source_wer": wer(labels, src_hyp),
            "speaker_cos": speaker_cosine(sig, speaker.vector),
            "true_ratio": true_ratio,
            "predicted_ratio": pred_ratio,
            "out_len": int(out.features.shape[0]),
            "target_len": int(len(target)),
            "mode": mode,
        })
    return EvalReport(
        wer=float(np.mean([r["wer"] for r in rows])),
        source_wer=float(np.mean([r["source_wer"] for r in rows])),
        speaker_cos=float(np.mean([r["speaker_cos"] for r in rows])),
        dur_ratio_mae=float(np.mean([abs(r["predicted_ratio"] - r["true_ratio"]) for r in rows])),
        mode=mode,
        rows=rows,
    )


def write_report(path, report: EvalReport) -> None:
    lines = [json.dumps(r, sort_keys=False) for r in report.rows]
    head = json.dumps({
        "wer": report.wer, "source_wer": report.source_wer,
        "speaker_cos": report.speaker_cos, "dur_ratio_mae": report.dur_ratio_mae,
        "mode": report.mode,
    })
    Path(path).write_text("\n".join([head] + lines) + "\n", encoding="utf-8")

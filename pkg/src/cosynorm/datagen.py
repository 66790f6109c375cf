"""Synthetic paired-data pipeline.

Builds a desk-scale corpus of (accented source, native target) feature
pairs: render native utterances from a seeded symbol bank, impose an
accent by deterministic time-stretching plus symbol-direction
perturbations, score candidates with a heuristic accentedness scorer,
filter, pair items with accent prompts balanced per prompt speaker, and
emit feature files plus a line-delimited manifest.

Every random draw derives from (seed, tag, id), so rebuilding with the
same config is byte-identical and per-utterance work can run in parallel.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import derive_rng


@dataclass
class ToySpeaker:
    speaker_id: str
    signature: np.ndarray  # unit norm; also the additive timbre offset direction


@dataclass
class AccentRule:
    accent_id: str
    stretch: float = 1.3
    substitution_map: dict = field(default_factory=dict)  # symbol -> offset vector
    jitter: float = 0.05
    substitution_prob: float = 1.0   # per-run application probability
    strength_jitter: float = 0.0     # per-run offset magnitude jitter
    frame_jitter: float = 0.0        # per-frame offset magnitude jitter

    def __post_init__(self):
        if self.stretch <= 0:
            raise ValueError("stretch must be positive")
        if not 0.0 <= self.jitter <= 0.2:
            raise ValueError("jitter must lie in [0, 0.2]")
        if not 0.0 <= self.substitution_prob <= 1.0:
            raise ValueError("substitution_prob must lie in [0, 1]")
        if not 0.0 <= self.strength_jitter < 1.0:
            raise ValueError("strength_jitter must lie in [0, 1)")
        if not 0.0 <= self.frame_jitter < 1.0:
            raise ValueError("frame_jitter must lie in [0, 1)")


@dataclass
class AccentRuleSpec:
    """Config-level description; the world turns it into vectors.

    Substitutions are bidirectional symbol confusions: each chosen pair
    (a, b) moves a's frames ``strength`` of the way toward b and b's frames
    the same amount toward a, so the accented renderings of the two symbols
    crowd the middle of the segment while staying clear of clean clusters.
    """

    accent_id: str = "toyacc"
    stretch: float = 1.3
    jitter: float = 0.05
    substitution_strength: float = 0.38
    n_substitutions: int = 2
    substitution_prob: float = 0.75
    strength_jitter: float = 0.10
    frame_jitter: float = 0.45


@dataclass
class ManifestEntry:
    utt_id: str
    speaker_id: str
    accent_id: str
    label_file: str
    source_feature_file: str
    target_feature_file: str
    split: str
    accent_score: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=False)

    @staticmethod
    def from_json(line: str) -> "ManifestEntry":
        return ManifestEntry(**json.loads(line))


@dataclass
class DatasetConfig:
    n_speakers: int = 8
    n_sentences: int = 80
    n_val_sentences: int = 10
    n_test_sentences: int = 12
    feature_dim: int = 8
    speaker_dim: int = 8
    vocab_size: int = 8
    sentence_len_min: int = 4
    sentence_len_max: int = 8
    frames_per_symbol_min: int = 5
    frames_per_symbol_max: int = 7
    base_scale: float = 2.0
    speaker_scale: float = 0.5
    noise_scale: float = 0.25
    score_threshold: float = 0.5
    min_per_speaker: int = 10
    seed: int = 0
    rules: list = field(default_factory=lambda: [AccentRuleSpec()])

    def __post_init__(self):
        try:
            self.rules = [
                r if isinstance(r, AccentRuleSpec) else AccentRuleSpec(**r)
                for r in self.rules
            ]
        except TypeError as exc:
            raise ValueError(f"bad accent rule spec: {exc}") from None
        if self.speaker_dim != self.feature_dim:
            raise ValueError("toy features add the signature directly; "
                             "speaker_dim must equal feature_dim")
        if self.vocab_size < 3:
            raise ValueError("need at least two non-blank symbols")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "DatasetConfig":
        known = {f.name for f in dataclasses.fields(DatasetConfig)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown dataset config keys: {sorted(unknown)}")
        return DatasetConfig(**d)


# -- feature / label / manifest files ----------------------------------------


def write_features(path, feats: np.ndarray) -> None:
    feats = np.ascontiguousarray(feats, dtype="<f4")
    header = np.asarray(feats.shape, dtype="<u4").tobytes()
    Path(path).write_bytes(header + feats.tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    t_len, dim = np.frombuffer(raw[:8], dtype="<u4")
    return np.frombuffer(raw[8:], dtype="<f4").reshape(int(t_len), int(dim)).copy()


def write_labels(path, labels) -> None:
    Path(path).write_text(" ".join(str(int(s)) for s in labels) + "\n", encoding="utf-8")


def read_labels(path) -> list[int]:
    text = Path(path).read_text(encoding="utf-8").strip()
    return [int(tok) for tok in text.split()] if text else []


def write_manifest(path, entries) -> None:
    lines = [e.to_json() for e in sorted(entries, key=lambda e: e.utt_id)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> list[ManifestEntry]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ManifestEntry.from_json(line) for line in lines if line.strip()]


# -- the toy world -------------------------------------------------------------


class ToyWorld:
    """Symbol bank, speakers, and accent rules derived from a config seed."""

    def __init__(self, config: DatasetConfig):
        self.config = config
        d = config.feature_dim
        rng = derive_rng(config.seed, "symbols")
        bank = np.zeros((config.vocab_size, d))
        for s in range(1, config.vocab_size):
            v = rng.standard_normal(d)
            bank[s] = config.base_scale * v / np.linalg.norm(v)
        self.symbol_bank = bank

        self.speakers = []
        for i in range(config.n_speakers):
            srng = derive_rng(config.seed, "speaker", i)
            v = srng.standard_normal(d)
            self.speakers.append(ToySpeaker(f"spk{i:02d}", v / np.linalg.norm(v)))
        sigs = np.stack([s.signature for s in self.speakers])
        gram = sigs @ sigs.T
        np.fill_diagonal(gram, 0.0)
        if gram.max() > 1.0 - 1e-9:
            raise ValueError("speaker signatures are not pairwise distinct")

        # every (symbol, speaker) cluster center; the scorer measures against
        # these so timbre offsets never erode the substitution margin
        offsets = config.speaker_scale * sigs
        self.clean_cloud = (bank[1:, None, :] + offsets[None, :, :]).reshape(-1, d)

        self.rules = [self._build_rule(spec, i) for i, spec in enumerate(config.rules)]
        self._roughness_native = self._calibrate_roughness()

    def _build_rule(self, spec: AccentRuleSpec, index: int) -> AccentRule:
        """Pick confusion pairs whose perturbed clusters keep a margin from
        every clean (symbol, speaker) center, so clean speech never scores
        as accented; widest-separated pairs are preferred."""
        rng = derive_rng(self.config.seed, "rule", spec.accent_id)
        symbols = [int(s) for s in rng.permutation(np.arange(1, self.config.vocab_size))]
        cand = [(a, b) for i, a in enumerate(symbols) for b in symbols[i + 1:]]
        cand.sort(key=lambda p: -np.linalg.norm(self.symbol_bank[p[0]] - self.symbol_bank[p[1]]))
        offsets = self.config.speaker_scale * np.stack([s.signature for s in self.speakers])
        sub = {}
        n_pairs = min(spec.n_substitutions, len(symbols) // 2)
        for margin in (1.3, 1.1, 0.95, 0.85):
            used = set()
            chosen = {}
            for a, b in cand:
                if a in used or b in used:
                    continue
                step = spec.substitution_strength * (self.symbol_bank[b] - self.symbol_bank[a])
                gap = min(
                    float(np.linalg.norm(
                        self.clean_cloud[None, :, :]
                        - (self.symbol_bank[a] + step + offsets)[:, None, :], axis=2).min()),
                    float(np.linalg.norm(
                        self.clean_cloud[None, :, :]
                        - (self.symbol_bank[b] - step + offsets)[:, None, :], axis=2).min()))
                if gap < margin:
                    continue
                chosen[a] = step
                chosen[b] = -step
                used.update((a, b))
                if len(chosen) == 2 * n_pairs:
                    break
            if len(chosen) == 2 * n_pairs:
                sub = chosen
                break
            sub = chosen
        return AccentRule(spec.accent_id, spec.stretch, sub, spec.jitter,
                          spec.substitution_prob, spec.strength_jitter,
                          spec.frame_jitter)

    def rule_for_speaker(self, speaker_index: int) -> AccentRule:
        return self.rules[speaker_index % len(self.rules)]

    def sentence_labels(self, sentence_index: int) -> list[int]:
        """Symbol sequence without adjacent repeats (runs stay unambiguous)."""
        rng = derive_rng(self.config.seed, "sentence", sentence_index)
        n = int(rng.integers(self.config.sentence_len_min, self.config.sentence_len_max + 1))
        v = self.config.vocab_size
        labels = [int(rng.integers(1, v))]
        for _ in range(n - 1):
            step = int(rng.integers(1, v - 1))
            labels.append(1 + (labels[-1] - 1 + step) % (v - 1))
        return labels

    # -- synthesis ---------------------------------------------------------

    def synth_native(self, speaker: ToySpeaker, labels, rng) -> np.ndarray:
        """Render labels as per-symbol frame runs with a timbre offset."""
        if len(labels) == 0:
            raise ValueError("labels must be non-empty")
        cfg = self.config
        runs = []
        for sym in labels:
            n = int(rng.integers(cfg.frames_per_symbol_min, cfg.frames_per_symbol_max + 1))
            base = self.symbol_bank[int(sym)] + cfg.speaker_scale * speaker.signature
            runs.append(base + cfg.noise_scale * rng.standard_normal((n, cfg.feature_dim)))
        return np.concatenate(runs, axis=0)

    def frame_symbols(self, features: np.ndarray) -> np.ndarray:
        """Nearest-base symbol id per frame (blank row excluded)."""
        dists = np.linalg.norm(
            features[:, None, :] - self.symbol_bank[None, 1:, :], axis=2)
        return dists.argmin(axis=1) + 1

    def accentify(self, native: np.ndarray, labels, rule: AccentRule, rng) -> np.ndarray:
        """Time-stretch by stretch*(1 + jitter*u), then perturb mapped symbols.

        Substitutions apply per symbol run: each run of a mapped symbol is
        shifted with probability substitution_prob, by the rule offset
        scaled with a per-run magnitude jitter plus an independent per-frame
        magnitude jitter. Accents are intermittent and unsteady, so sources
        keep clean renderings of every symbol while individual frames of a
        shifted run wander across the confusion boundary.
        """
        t_len = native.shape[0]
        u = float(rng.uniform(-1.0, 1.0))
        factor = rule.stretch * (1.0 + rule.jitter * u)
        out_len = max(1, int(round(factor * t_len)))
        if t_len == 1:
            out = np.repeat(native, out_len, axis=0)
            src_of_frame = np.zeros(out_len, dtype=int)
        else:
            pos = np.linspace(0.0, t_len - 1.0, out_len)
            lo = np.floor(pos).astype(int)
            hi = np.minimum(lo + 1, t_len - 1)
            w = (pos - lo)[:, None]
            out = (1.0 - w) * native[lo] + w * native[hi]
            src_of_frame = np.clip(np.round(pos).astype(int), 0, t_len - 1)
        if rule.substitution_map:
            src_sym = self.frame_symbols(native)
            run_id = np.concatenate([[0], np.cumsum(src_sym[1:] != src_sym[:-1])])
            for run in range(int(run_id[-1]) + 1):
                run_frames = np.flatnonzero(run_id == run)
                sym = int(src_sym[run_frames[0]])
                if sym not in rule.substitution_map:
                    continue
                apply = float(rng.uniform()) < rule.substitution_prob
                lam = 1.0 + rule.strength_jitter * float(rng.uniform(-1.0, 1.0))
                if not apply:
                    continue
                members = np.isin(src_of_frame, run_frames)
                scale = lam + rule.frame_jitter * rng.uniform(-1.0, 1.0, int(members.sum()))
                out[members] += scale[:, None] * rule.substitution_map[sym]
        return out

    # -- scoring ------------------------------------------------------------

    def _calibrate_roughness(self) -> float:
        """Low-quantile adjacent-frame distance of pure per-frame noise.

        Content-independent reference: within-run differences are pure
        noise differences and dominate the low quantiles; boundary jumps
        only inflate the upper tail.
        """
        rng = derive_rng(self.config.seed, "roughness")
        g = rng.standard_normal((20000, 2, self.config.feature_dim))
        diffs = np.linalg.norm(g[:, 0] - g[:, 1], axis=1)
        return float(self.config.noise_scale * np.quantile(diffs, 0.3))

    def estimate_stretch(self, features: np.ndarray) -> float:
        """Heuristic stretch estimate from track smoothness.

        Interpolation resampling both shrinks adjacent-frame distances and
        correlates consecutive difference vectors; unstretched tracks have
        noise-scale distances and anti-correlated differences. Returns 1.0
        for unstretched-looking input, > 1 with increasing smoothness.
        """
        if features.shape[0] < 3:
            return 1.0
        deltas = np.diff(features, axis=0)
        dist = np.linalg.norm(deltas, axis=1)
        q = float(np.quantile(dist, 0.3))
        ratio = self._roughness_native / max(q, 1e-9)
        num = (deltas[:-1] * deltas[1:]).sum(axis=1)
        den = dist[:-1] * dist[1:] + 1e-12
        dcos = float(np.mean(num / den))
        return 1.0 + max(0.0, ratio - 1.0) + max(0.0, dcos + 0.25)

    def accent_score(self, features: np.ndarray, rules) -> float:
        """Substitution-direction energy plus stretch deviation, squashed to (0, 1).

        Energy counts frames that sit closer to an accent prototype
        (base + offset) than to any clean symbol base; the stretch term is
        the deviation of the smoothness-based estimate from 1.0.
        """
        if not rules:
            raise ValueError("need at least one accent rule")
        offsets = self.config.speaker_scale * np.stack([s.signature for s in self.speakers])
        proto_accented = []
        for rule in rules:
            for sym, offset in rule.substitution_map.items():
                proto_accented.append(self.symbol_bank[int(sym)] + offset + offsets)
        if proto_accented:
            cloud = np.concatenate([self.clean_cloud] + proto_accented)
            n_clean = self.clean_cloud.shape[0]
            dists = np.linalg.norm(features[:, None, :] - cloud[None, :, :], axis=2)
            sub_energy = float(np.mean(dists.argmin(axis=1) >= n_clean))
        else:
            sub_energy = 0.0
        stretch_dev = abs(self.estimate_stretch(features) - 1.0)
        raw = sub_energy + 0.9 * stretch_dev
        return float(1.0 / (1.0 + np.exp(-12.0 * (raw - 0.35))))

    # -- speaker identification ---------------------------------------------

    def extract_signature(self, features: np.ndarray) -> np.ndarray:
        """Least-squares projection of the mean frame residual onto the
        span of known speaker signatures."""
        syms = self.frame_symbols(features)
        residual = (features - self.symbol_bank[syms]).mean(axis=0)
        residual = residual / self.config.speaker_scale
        sigs = np.stack([s.signature for s in self.speakers])
        coef, *_ = np.linalg.lstsq(sigs.T, residual, rcond=None)
        return sigs.T @ coef

    def speaker_by_id(self, speaker_id: str) -> ToySpeaker:
        for s in self.speakers:
            if s.speaker_id == speaker_id:
                return s
        raise KeyError(f"unknown speaker: {speaker_id}")


def speaker_cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


# -- selection, splitting, pairing ----------------------------------------------


def split_subsets(sentence_ids, n_val: int = 50, n_test: int = 80, rng=None) -> dict:
    """Sentence-level partition: seeded shuffle, slice val then test."""
    ids = list(sentence_ids)
    if len(ids) <= n_val + n_test:
        raise ValueError(
            f"need more than {n_val + n_test} sentences, got {len(ids)}")
    if rng is None:
        raise ValueError("an RNG is required for the shuffle")
    order = [ids[i] for i in rng.permutation(len(ids))]
    return {
        "val": sorted(order[:n_val]),
        "test": sorted(order[n_val:n_val + n_test]),
        "train": sorted(order[n_val + n_test:]),
    }


def filter_prompts(entries, threshold: float = 0.5, min_per_speaker: int = 0):
    """Keep entries scoring above threshold; each speaker additionally keeps
    at least min(min_per_speaker, available) of its top-scored entries.
    Ties break by ascending utterance id."""
    entries = list(entries)
    if not entries:
        raise ValueError("no prompt entries to filter")
    kept = {e.utt_id: e for e in entries if e.accent_score > threshold}
    by_speaker = {}
    for e in entries:
        by_speaker.setdefault(e.speaker_id, []).append(e)
    for speaker_entries in by_speaker.values():
        have = [e for e in speaker_entries if e.utt_id in kept]
        need = min(min_per_speaker, len(speaker_entries)) - len(have)
        if need > 0:
            rest = sorted(
                (e for e in speaker_entries if e.utt_id not in kept),
                key=lambda e: (-e.accent_score, e.utt_id))
            for e in rest[:need]:
                kept[e.utt_id] = e
    return sorted(kept.values(), key=lambda e: e.utt_id)


def pair_and_balance(items, prompts, rng) -> dict:
    """Assign each item one prompt so per-prompt-speaker usage counts differ
    by at most one. Returns {item_id: prompt_id}."""
    items = list(items)
    prompts = list(prompts)
    if not items or not prompts:
        raise ValueError("items and prompts must both be non-empty")
    by_speaker = {}
    for p in prompts:
        by_speaker.setdefault(p.speaker_id, []).append(p)
    speakers = sorted(by_speaker)
    for sp in speakers:
        by_speaker[sp].sort(key=lambda p: p.utt_id)
    order = [speakers[i] for i in rng.permutation(len(speakers))]
    slots = [order[i % len(order)] for i in range(len(items))]
    item_order = rng.permutation(len(items))
    assignment = {}
    for slot, item_idx in zip(slots, item_order):
        pool = by_speaker[slot]
        assignment[items[item_idx]] = pool[int(rng.integers(len(pool)))].utt_id
    return assignment


# -- the full pipeline -----------------------------------------------------------


@dataclass
class PromptCandidate:
    utt_id: str
    speaker_id: str
    sentence_id: str
    speaker_index: int
    sentence_index: int
    accent_id: str
    accent_score: float


def build_dataset(config: DatasetConfig, out_dir) -> list[ManifestEntry]:
    """Run split -> score/filter -> pair -> synthesize; write files + manifest.

    One candidate accented rendering exists per (speaker, sentence); the
    retained candidates define the corpus rows, and each row's final source
    is re-rendered with its assigned prompt's accent rule.
    """
    out_dir = Path(out_dir)
    world = ToyWorld(config)
    feat_dir = out_dir / "feats"
    label_dir = out_dir / "labels"
    feat_dir.mkdir(parents=True, exist_ok=True)
    label_dir.mkdir(parents=True, exist_ok=True)

    sentence_ids = [f"sent{i:04d}" for i in range(config.n_sentences)]
    split = split_subsets(
        sentence_ids, config.n_val_sentences, config.n_test_sentences,
        derive_rng(config.seed, "split"))
    split_of = {}
    for name, ids in split.items():
        for sid in ids:
            split_of[sid] = name

    candidates = []
    for si, speaker in enumerate(world.speakers):
        rule = world.rule_for_speaker(si)
        for ci, sid in enumerate(sentence_ids):
            utt_id = f"{speaker.speaker_id}_{sid}"
            labels = world.sentence_labels(ci)
            native = world.synth_native(speaker, labels, derive_rng(config.seed, "native", utt_id))
            accented = world.accentify(native, labels, rule, derive_rng(config.seed, "prompt", utt_id))
            candidates.append(PromptCandidate(
                utt_id, speaker.speaker_id, sid, si, ci, rule.accent_id,
                world.accent_score(accented, world.rules)))

    retained = filter_prompts(candidates, config.score_threshold, config.min_per_speaker)
    by_id = {c.utt_id: c for c in candidates}
    assignment = pair_and_balance(
        [c.utt_id for c in retained], retained, derive_rng(config.seed, "pair"))

    entries = []
    for cand_id in sorted(assignment):
        item = by_id[cand_id]
        prompt = by_id[assignment[cand_id]]
        speaker = world.speakers[item.speaker_index]
        labels = world.sentence_labels(item.sentence_index)
        rule = world.rule_for_speaker(prompt.speaker_index)
        native = world.synth_native(speaker, labels, derive_rng(config.seed, "native", item.utt_id))
        source = world.accentify(native, labels, rule, derive_rng(config.seed, "final", item.utt_id))

        label_file = f"labels/{item.sentence_id}.txt"
        src_file = f"feats/{item.utt_id}.src.bin"
        tgt_file = f"feats/{item.utt_id}.tgt.bin"
        write_labels(out_dir / label_file, labels)
        write_features(out_dir / src_file, source)
        write_features(out_dir / tgt_file, native)
        entries.append(ManifestEntry(
            utt_id=item.utt_id,
            speaker_id=item.speaker_id,
            accent_id=rule.accent_id,
            label_file=label_file,
            source_feature_file=src_file,
            target_feature_file=tgt_file,
            split=split_of[item.sentence_id],
            accent_score=round(prompt.accent_score, 6),
        ))

    write_manifest(out_dir / "manifest.jsonl", entries)
    (out_dir / "dataset.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=False) + "\n", encoding="utf-8")
    return entries


def load_world(dataset_dir) -> ToyWorld:
    cfg = DatasetConfig.from_dict(
        json.loads((Path(dataset_dir) / "dataset.json").read_text(encoding="utf-8")))
    return ToyWorld(cfg)

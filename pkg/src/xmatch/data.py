"""Precomputed object features, labeled pairs, candidate pools and batching.

Object features come from an external detector and are ingested as JSONL::

    {"image_id": "img1", "objects": [{"box": [x1, y1, x2, y2], "feat": [...]}, ...]}

Boxes are normalized to [0, 1] with ``x1 < x2`` and ``y1 < y2``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .numerics import DTYPE
from .tokenizer import SPECIALS, TokenSequence, Vocabulary, encode, pre_tokenize

PAPER_N_OBJ = 36
PAPER_D_FEAT = 2048


class DataError(ValueError):
    pass


@dataclass(eq=False)
class ImageRecord:
    image_id: str
    boxes: np.ndarray  # (n, 4)
    feats: np.ndarray  # (n, d_feat)

    @property
    def n_objects(self) -> int:
        return self.boxes.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ImageRecord):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.boxes.shape == other.boxes.shape
            and self.feats.shape == other.feats.shape
            and bool(np.array_equal(self.boxes, other.boxes))
            and bool(np.array_equal(self.feats, other.feats))
        )

    def permuted(self, order: Sequence[int]) -> "ImageRecord":
        order = list(order)
        return ImageRecord(self.image_id, self.boxes[order], self.feats[order])

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "objects": [
                {"box": [float(v) for v in b], "feat": [float(v) for v in f]}
                for b, f in zip(self.boxes, self.feats)
            ],
        }


@dataclass(frozen=True)
class LabeledPair:
    phrase: str
    image_id: str
    label: int
    app_id: str | None = None

    def to_json(self) -> dict:
        out = {"phrase": self.phrase, "image_id": self.image_id, "label": self.label}
        if self.app_id is not None:
            out["app_id"] = self.app_id
        return out


@dataclass(frozen=True)
class CandidatePool:
    image_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.image_ids:
            raise DataError("candidate pool is empty")
        seen = set()
        for i in self.image_ids:
            if i in seen:
                raise DataError(f"duplicate image id {i!r} in candidate pool")
            seen.add(i)


@dataclass(eq=False)
class PaddedImageBatch:
    boxes: np.ndarray  # (B, N, 4)
    feats: np.ndarray  # (B, N, d_feat)
    obj_mask: np.ndarray  # (B, N)


@dataclass(eq=False)
class Batch:
    ids: np.ndarray  # (B, L) int
    text_mask: np.ndarray  # (B, L)
    images: PaddedImageBatch
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return self.ids.shape[0]


# ---------------------------------------------------------------------------
# validation / IO


def _check_box(box, where: str) -> None:
    if len(box) != 4:
        raise DataError(f"{where}: box must have 4 coordinates, got {len(box)}")
    x1, y1, x2, y2 = box
    if not all(np.isfinite(box)):
        raise DataError(f"{where}: box has non-finite coordinates")
    if not (0.0 <= x1 < x2 <= 1.0):
        raise DataError(f"{where}: need 0 <= x1 < x2 <= 1, got x1={x1}, x2={x2}")
    if not (0.0 <= y1 < y2 <= 1.0):
        raise DataError(f"{where}: need 0 <= y1 < y2 <= 1, got y1={y1}, y2={y2}")


def parse_image_record(obj: Mapping, n_obj: int, d_feat: int | None, where: str) -> ImageRecord:
    try:
        image_id = obj["image_id"]
        objects = obj["objects"]
    except (KeyError, TypeError):
        raise DataError(f"{where}: record needs 'image_id' and 'objects'") from None
    if not isinstance(image_id, str):
        raise DataError(f"{where}: image_id must be a string")
    if not objects:
        raise DataError(f"{where}: image {image_id!r} has no objects")
    if len(objects) > n_obj:
        raise DataError(f"{where}: image {image_id!r} has {len(objects)} objects, limit is {n_obj}")
    boxes, feats = [], []
    for j, o in enumerate(objects):
        here = f"{where}, object {j}"
        try:
            box, feat = o["box"], o["feat"]
        except (KeyError, TypeError):
            raise DataError(f"{here}: object needs 'box' and 'feat'") from None
        _check_box(box, here)
        want = d_feat if d_feat is not None else len(objects[0]["feat"])
        if len(feat) != want:
            raise DataError(f"{here}: feature length {len(feat)}, expected {want}")
        boxes.append(box)
        feats.append(feat)
    rec = ImageRecord(image_id, np.array(boxes, dtype=DTYPE), np.array(feats, dtype=DTYPE))
    if not np.all(np.isfinite(rec.feats)):
        raise DataError(f"{where}: non-finite feature values")
    return rec


def _read_jsonl(path: str | Path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None


def load_features(
    path: str | Path, n_obj: int = PAPER_N_OBJ, d_feat: int | None = None
) -> dict[str, ImageRecord]:
    """Load and validate a features JSONL file keyed by image id.

    With ``d_feat=None`` the width is taken from the first record and every
    later record must agree.
    """
    store: dict[str, ImageRecord] = {}
    for lineno, obj in _read_jsonl(path):
        where = f"{path}:{lineno}"
        rec = parse_image_record(obj, n_obj, d_feat, where)
        if d_feat is None:
            d_feat = rec.feats.shape[1]
        if rec.image_id in store:
            raise DataError(f"{where}: duplicate image id {rec.image_id!r}")
        store[rec.image_id] = rec
    return store


def write_features(records: Iterable[ImageRecord], path: str | Path) -> None:
    # json emits repr() floats, the shortest string that round-trips exactly
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json()) + "\n")


def load_pairs(path: str | Path) -> list[LabeledPair]:
    pairs = []
    for lineno, obj in _read_jsonl(path):
        where = f"{path}:{lineno}"
        try:
            phrase, image_id, label = obj["phrase"], obj["image_id"], obj["label"]
        except (KeyError, TypeError):
            raise DataError(f"{where}: pair needs 'phrase', 'image_id' and 'label'") from None
        if isinstance(label, bool) or label not in (0, 1):
            raise DataError(f"{where}: label must be 0 or 1, got {label!r}")
        app_id = obj.get("app_id")
        if not isinstance(phrase, str) or not isinstance(image_id, str):
            raise DataError(f"{where}: phrase and image_id must be strings")
        if app_id is not None and not isinstance(app_id, str):
            raise DataError(f"{where}: app_id must be a string")
        pairs.append(LabeledPair(phrase, image_id, int(label), app_id))
    return pairs


def write_pairs(pairs: Iterable[LabeledPair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps(p.to_json()) + "\n")


def load_pool(path: str | Path) -> CandidatePool:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        ids = obj["image_ids"]
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed JSON ({exc.msg})") from None
    except (KeyError, TypeError):
        raise DataError(f"{path}: pool needs an 'image_ids' list") from None
    if not isinstance(ids, list) or not all(isinstance(i, str) for i in ids):
        raise DataError(f"{path}: 'image_ids' must be a list of strings")
    return CandidatePool(tuple(ids))


def write_pool(pool: CandidatePool, path: str | Path) -> None:
    Path(path).write_text(json.dumps({"image_ids": list(pool.image_ids)}) + "\n", encoding="utf-8")


def phrase_sets(pairs: Iterable[LabeledPair]) -> dict[str, set[str]]:
    """Distinct phrases per app id."""
    out: dict[str, set[str]] = {}
    for p in pairs:
        if p.app_id is not None:
            out.setdefault(p.app_id, set()).add(p.phrase)
    return out


# ---------------------------------------------------------------------------
# batching


def pad_images(records: Sequence[ImageRecord], n_obj: int) -> PaddedImageBatch:
    d_feat = records[0].feats.shape[1]
    b = len(records)
    boxes = np.zeros((b, n_obj, 4), dtype=DTYPE)
    feats = np.zeros((b, n_obj, d_feat), dtype=DTYPE)
    mask = np.zeros((b, n_obj), dtype=DTYPE)
    for i, rec in enumerate(records):
        n = rec.n_objects
        if n > n_obj:
            raise DataError(f"image {rec.image_id!r} has {n} objects, more than N_obj={n_obj}")
        boxes[i, :n] = rec.boxes
        feats[i, :n] = rec.feats
        mask[i, :n] = 1.0
    return PaddedImageBatch(boxes, feats, mask)


def collate(
    tokens: Sequence[TokenSequence],
    records: Sequence[ImageRecord],
    n_obj: int,
    labels: Sequence[int] | None = None,
) -> Batch:
    ids = np.array([t.ids for t in tokens], dtype=np.int64)
    mask = np.array([t.mask for t in tokens], dtype=DTYPE)
    y = None if labels is None else np.array(labels, dtype=DTYPE)
    return Batch(ids, mask, pad_images(records, n_obj), y)


def batch_from_pairs(
    pairs: Sequence[LabeledPair],
    features: Mapping[str, ImageRecord],
    vocab: Vocabulary,
    max_len: int,
    n_obj: int,
) -> Batch:
    records = []
    for p in pairs:
        if p.image_id not in features:
            raise DataError(f"unknown image id {p.image_id!r}")
        records.append(features[p.image_id])
    tokens = [encode(p.phrase, vocab, max_len) for p in pairs]
    return collate(tokens, records, n_obj, [p.label for p in pairs])


def make_batches(
    pairs: Sequence[LabeledPair],
    features: Mapping[str, ImageRecord],
    batch_size: int,
    seed: int,
) -> list[list[LabeledPair]]:
    """One epoch of shuffled mini-batches; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    for p in pairs:
        if p.image_id not in features:
            raise DataError(f"pair references unknown image id {p.image_id!r}")
    order = np.random.default_rng(seed).permutation(len(pairs))
    return [[pairs[i] for i in order[s : s + batch_size]] for s in range(0, len(pairs), batch_size)]


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SynthSpec:
    """Parameters of the synthetic membership-rule corpus.

    Each keyword maps to a code; each object carries one code, encoded in its
    feature vector as that code's prototype plus Gaussian noise.  A pair is
    positive iff the code of the phrase's keyword is among the image's object
    codes.
    """

    keywords: dict[str, int] = field(
        default_factory=lambda: {
            "puzzle": 0,
            "racing": 1,
            "chess": 2,
            "poker": 3,
            "farming": 4,
            "soccer": 5,
            "music": 6,
            "photo": 7,
        }
    )
    # words that may surround the keyword; off by default, the cross model then
    # needs far more than 400 pairs to find the keyword reliably
    fillers: list[str] = field(default_factory=list)
    # non-special vocab entries; "racing" and "farming" only exist as pieces
    pieces: list[str] = field(
        default_factory=lambda: [
            "puzzle", "chess", "poker", "soccer", "music", "photo", "rac", "farm",
            "##ing", "##s", "##er", "game", "app", "free", "best", "fun", "new",
            "!", "-", "&",
        ]
        + list("abcdefghijklmnopqrstuvwxyz")
    )
    n_codes: int = 10
    n_images: int = 200
    eval_image_fraction: float = 0.25
    n_train: int = 400
    n_eval: int = 100
    pool_size: int = 8
    n_obj: int = 4
    d_feat: int = 8
    noise: float = 0.2
    n_apps: int = 6
    # orthogonal prototypes of norm sqrt(d_feat); needs n_codes <= d_feat
    orthogonal: bool = False

    def vocab_tokens(self) -> list[str]:
        return list(SPECIALS) + list(self.pieces)

    @classmethod
    def from_json(cls, obj: Mapping) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise DataError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass(eq=False)
class SynthCorpus:
    spec: SynthSpec
    features: dict[str, ImageRecord]
    train: list[LabeledPair]
    eval: list[LabeledPair]
    pool: CandidatePool
    prototypes: np.ndarray  # (n_codes, d_feat)
    codes: dict[str, tuple[int, ...]]  # image id -> object codes, in object order
    apps: dict[str, str]


def keyword_codes(phrase: str, spec: SynthSpec) -> set[int]:
    return {spec.keywords[w] for w in pre_tokenize(phrase) if w in spec.keywords}


def rule_label(phrase: str, image_codes: Iterable[int], spec: SynthSpec) -> int:
    return int(bool(keyword_codes(phrase, spec) & set(image_codes)))


def _random_box(rng: np.random.Generator) -> list[float]:
    x1, y1 = rng.uniform(0.0, 0.7, size=2)
    w, h = rng.uniform(0.1, 0.3, size=2)
    return [float(x1), float(y1), float(x1 + w), float(y1 + h)]


def _phrase(rng: np.random.Generator, keyword: str, fillers: Sequence[str]) -> str:
    if not fillers:
        return keyword
    a, b = rng.choice(len(fillers), size=2, replace=len(fillers) < 2)
    template = int(rng.integers(4))
    if template == 0:
        return keyword
    if template == 1:
        return f"{keyword} {fillers[a]}"
    if template == 2:
        return f"{fillers[a]} {keyword}"
    return f"{fillers[a]} {keyword} {fillers[b]}"


def _make_pairs(rng, n, image_ids, codes, apps, spec) -> list[LabeledPair]:
    """Pairs come in (positive, negative) couples on the same image.

    Every image then carries both labels, so image content alone does not
    predict the label; keywords are drawn uniformly among the image's
    present (positive) or absent (negative) keyword codes.
    """
    by_code: dict[int, list[str]] = {}
    for kw, code in spec.keywords.items():
        by_code.setdefault(code, []).append(kw)
    order = [image_ids[j] for j in rng.permutation(len(image_ids))]
    out = []
    for k in range(n):
        img = order[(k // 2) % len(order)]
        label = 1 - k % 2
        present = set(codes[img])
        cands = sorted(c for c in by_code if (c in present) == bool(label))
        code = cands[int(rng.integers(len(cands)))]
        kws = by_code[code]
        kw = kws[int(rng.integers(len(kws)))]
        out.append(LabeledPair(_phrase(rng, kw, spec.fillers), img, label, apps[img]))
    return [out[j] for j in rng.permutation(n)]


def synth_generate(spec: SynthSpec, seed: int) -> SynthCorpus:
    if max(spec.keywords.values()) >= spec.n_codes:
        raise DataError("keyword codes must be below n_codes")
    keyword_set = set(spec.keywords.values())
    rng = np.random.default_rng(seed)
    prototypes = rng.normal(size=(spec.n_codes, spec.d_feat))
    if spec.orthogonal:
        if spec.n_codes > spec.d_feat:
            raise DataError("orthogonal prototypes need n_codes <= d_feat")
        q, _ = np.linalg.qr(rng.normal(size=(spec.d_feat, spec.d_feat)))
        prototypes = np.sqrt(spec.d_feat) * q[: spec.n_codes]
    features: dict[str, ImageRecord] = {}
    codes: dict[str, tuple[int, ...]] = {}
    apps: dict[str, str] = {}
    width = len(str(spec.n_images - 1))
    for i in range(spec.n_images):
        image_id = f"img{i:0{width}d}"
        n = int(rng.integers(1, spec.n_obj + 1))
        while True:
            obj_codes = tuple(int(c) for c in rng.choice(spec.n_codes, size=n, replace=False))
            # need at least one keyword code present and one absent
            hit = sum(c in keyword_set for c in obj_codes)
            if 0 < hit < len(keyword_set):
                break
        feats = prototypes[list(obj_codes)] + spec.noise * rng.normal(size=(n, spec.d_feat))
        boxes = np.array([_random_box(rng) for _ in range(n)], dtype=DTYPE)
        features[image_id] = ImageRecord(image_id, boxes, feats)
        codes[image_id] = obj_codes
        apps[image_id] = f"app{i % spec.n_apps}"

    ids = list(features)
    order = rng.permutation(len(ids))
    n_eval_img = max(1, int(round(spec.eval_image_fraction * len(ids))))
    eval_ids = sorted(ids[j] for j in order[:n_eval_img])
    train_ids = sorted(ids[j] for j in order[n_eval_img:])

    train = _make_pairs(rng, spec.n_train, train_ids, codes, apps, spec)
    evals = _make_pairs(rng, spec.n_eval, eval_ids, codes, apps, spec)
    pool_ids = [eval_ids[j] for j in rng.choice(len(eval_ids), size=min(spec.pool_size, len(eval_ids)), replace=False)]
    return SynthCorpus(spec, features, train, evals, CandidatePool(tuple(pool_ids)), prototypes, codes, apps)


def pool_labels(corpus: SynthCorpus, phrase: str) -> dict[str, int]:
    return {i: rule_label(phrase, corpus.codes[i], corpus.spec) for i in corpus.pool.image_ids}


CORPUS_FILES = ("features.jsonl", "train.jsonl", "eval.jsonl", "pool.json", "vocab.txt", "synth_spec.json")


def write_corpus(corpus: SynthCorpus, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in CORPUS_FILES}
    write_features(corpus.features.values(), paths["features.jsonl"])
    write_pairs(corpus.train, paths["train.jsonl"])
    write_pairs(corpus.eval, paths["eval.jsonl"])
    write_pool(corpus.pool, paths["pool.json"])
    paths["vocab.txt"].write_text("".join(t + "\n" for t in corpus.spec.vocab_tokens()), encoding="utf-8")
    paths["synth_spec.json"].write_text(json.dumps(asdict(corpus.spec), indent=2) + "\n", encoding="utf-8")
    return paths

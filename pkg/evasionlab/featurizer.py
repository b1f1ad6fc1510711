"""
Featurizer

Hashes section names and imported functions into the fixed 518 dimension
presence vector, and keeps the benign dictionary used to turn a requested
bucket back into a concrete name.

Layout: indices 0-255 are section name buckets, 256-517 import buckets.
Every value is +0.5 (present) or -0.5 (absent).
"""
import json
import hashlib
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple
import numpy as np
import pandas as pd
from sklearn.utils import murmurhash3_32

from evasionlab.pe_core import ImportFunction, PeImage, PeFormatError, parse_pe

logger = logging.getLogger("flask.app")

SECTION_BUCKETS = 256
IMPORT_BUCKETS = 262
FEATURE_DIM = SECTION_BUCKETS + IMPORT_BUCKETS
HASH_ID = "murmur3_32:seed=0:lower"
DICTIONARY_VERSION = 1
PRESENT = 0.5
ABSENT = -0.5

FEATURE_COLUMNS = [f"f{index}" for index in range(FEATURE_DIM)]


class FeaturizerError(Exception):
    """Base class for featurizer errors"""


class EmptyToken(FeaturizerError):
    """Used when hashing an empty name"""


class BucketOutOfRange(FeaturizerError):
    """Used when a bucket index does not belong to the requested space"""


class EmptyCorpus(FeaturizerError):
    """Used when no usable file was supplied"""


class DimensionMismatch(FeaturizerError):
    """Used when a vector is not 518 long"""


class Space(Enum):
    """The two feature spaces"""

    SECTION = "section"
    IMPORT = "import"

    @property
    def offset(self) -> int:
        """First index of the space"""
        return 0 if self is Space.SECTION else SECTION_BUCKETS

    @property
    def size(self) -> int:
        """Number of buckets in the space"""
        return SECTION_BUCKETS if self is Space.SECTION else IMPORT_BUCKETS

    def contains(self, bucket: int) -> bool:
        """True when bucket is an index of this space"""
        return self.offset <= bucket < self.offset + self.size


def hash_bucket(token: str, space: Space) -> int:
    """Maps a token to its global feature index"""
    if not token:
        raise EmptyToken("cannot hash an empty token")
    value = murmurhash3_32(token.lower(), seed=0, positive=True)
    return space.offset + value % space.size


def import_token(dll_name: str, function: ImportFunction) -> str:
    """The lower-cased dll!function token (dll!#N for ordinals)"""
    return f"{dll_name}!{function.label}".lower()


def section_tokens(image: PeImage) -> List[str]:
    """Section names of an image, empty names skipped"""
    return [section.name for section in image.sections if section.name]


def import_tokens(image: PeImage) -> List[str]:
    """Import tokens of an image"""
    return [import_token(d.dll_name, f) for d in image.imports for f in d.functions]


######################################################################
#  F E A T U R E   V E C T O R
######################################################################
class FeatureVector:
    """An immutable 518 long vector of +-0.5 values"""

    __slots__ = ("values",)

    def __init__(self, values):
        array = np.array(values, dtype=np.float64)
        if array.shape != (FEATURE_DIM,):
            raise DimensionMismatch(f"expected {FEATURE_DIM} values, got shape {array.shape}")
        if not np.all(np.isin(array, (ABSENT, PRESENT))):
            raise ValueError("feature values must be -0.5 or +0.5")
        array.flags.writeable = False
        self.values = array

    @classmethod
    def empty(cls) -> "FeatureVector":
        """The all-absent vector"""
        return cls(np.full(FEATURE_DIM, ABSENT))

    @classmethod
    def from_binary(cls, bits) -> "FeatureVector":
        """Builds a vector from 0/1 presence bits"""
        bits = np.asarray(bits)
        if bits.shape != (FEATURE_DIM,):
            raise DimensionMismatch(f"expected {FEATURE_DIM} bits, got shape {bits.shape}")
        return cls(np.where(bits > 0, PRESENT, ABSENT))

    def binary(self) -> np.ndarray:
        """0/1 presence bits"""
        return (self.values > 0).astype(np.int8)

    def active(self, space: Optional[Space] = None) -> List[int]:
        """Indices of present features, optionally restricted to one space"""
        indices = np.flatnonzero(self.values > 0).tolist()
        if space is None:
            return indices
        return [index for index in indices if space.contains(index)]

    def __len__(self) -> int:
        return FEATURE_DIM

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureVector):
            return NotImplemented
        return bool(np.array_equal(self.values, other.values))

    def __hash__(self) -> int:
        return hash(self.values.tobytes())

    def __repr__(self) -> str:
        return f"<FeatureVector active={self.active()}>"


def extract_features(image: PeImage) -> FeatureVector:
    """Presence vector of the section names and imports of an image"""
    bits = np.zeros(FEATURE_DIM, dtype=np.int8)
    for name in section_tokens(image):
        bits[hash_bucket(name, Space.SECTION)] = 1
    for token in import_tokens(image):
        bits[hash_bucket(token, Space.IMPORT)] = 1
    return FeatureVector.from_binary(bits)


def feature_layout_digest() -> str:
    """Identifies the split and hash every artifact was built with"""
    layout = {"split": {"sections": SECTION_BUCKETS, "imports": IMPORT_BUCKETS}, "hash_id": HASH_ID}
    return hashlib.sha256(json.dumps(layout, sort_keys=True).encode("utf-8")).hexdigest()


######################################################################
#  B E N I G N   D I C T I O N A R Y
######################################################################
@dataclass(frozen=True)
class BenignDictionary:
    """
    Bucket -> candidate names harvested from benign files

    sections maps a section bucket to sorted section names, imports maps an
    import bucket to sorted (dll_name, function) pairs. Function is "#N"
    for ordinal imports.
    """

    sections: Dict[int, Tuple[str, ...]]
    imports: Dict[int, Tuple[Tuple[str, str], ...]]
    provenance: str = ""
    warnings: Tuple[str, ...] = field(default=(), compare=False)
    config_digest: str = ""

    def serialize(self) -> dict:
        """Serializes the dictionary into its versioned JSON form"""
        return {
            "version": DICTIONARY_VERSION,
            "split": {"sections": SECTION_BUCKETS, "imports": IMPORT_BUCKETS},
            "hash_id": HASH_ID,
            "layout_digest": feature_layout_digest(),
            "provenance": self.provenance,
            "config_digest": self.config_digest,
            "buckets": {
                "section": {str(b): list(names) for b, names in sorted(self.sections.items())},
                "import": {str(b): [list(pair) for pair in pairs] for b, pairs in sorted(self.imports.items())},
            },
        }

    @classmethod
    def deserialize(cls, data: dict) -> "BenignDictionary":
        """Rebuilds a dictionary, refusing other layouts"""
        if data.get("version") != DICTIONARY_VERSION or data.get("hash_id") != HASH_ID:
            raise FeaturizerError("dictionary was built with another version or hash")
        split = data.get("split", {})
        if split.get("sections") != SECTION_BUCKETS or split.get("imports") != IMPORT_BUCKETS:
            raise FeaturizerError("dictionary was built with another feature split")
        buckets = data["buckets"]
        return cls(
            sections={int(b): tuple(names) for b, names in buckets["section"].items()},
            imports={int(b): tuple((dll, fn) for dll, fn in pairs) for b, pairs in buckets["import"].items()},
            provenance=data.get("provenance", ""),
            config_digest=data.get("config_digest", ""),
        )

    def save(self, path) -> None:
        """Writes the JSON form to path"""
        Path(path).write_text(json.dumps(self.serialize(), sort_keys=True, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BenignDictionary":
        """Reads a dictionary written by save"""
        return cls.deserialize(json.loads(Path(path).read_text(encoding="utf-8")))


def dictionary_from_images(images: Iterable[PeImage], provenance: str = "") -> BenignDictionary:
    """Indexes every section name and import pair of the images"""
    sections: Dict[int, set] = {}
    imports: Dict[int, set] = {}
    for image in images:
        for name in section_tokens(image):
            sections.setdefault(hash_bucket(name, Space.SECTION), set()).add(name)
        for descriptor in image.imports:
            for function in descriptor.functions:
                bucket = hash_bucket(import_token(descriptor.dll_name, function), Space.IMPORT)
                imports.setdefault(bucket, set()).add((descriptor.dll_name, function.label))
    return BenignDictionary(
        sections={bucket: tuple(sorted(names)) for bucket, names in sections.items()},
        imports={bucket: tuple(sorted(pairs)) for bucket, pairs in imports.items()},
        provenance=provenance,
    )


def build_benign_dictionary(corpus: Sequence, config_digest: str = "") -> BenignDictionary:
    """Harvests names from benign PE files

    Files that fail to parse are skipped with a warning. The provenance is
    the sha256 over the sorted file digests, so file order does not matter.
    config_digest stamps the settings the dictionary was built under.
    """
    if not corpus:
        raise EmptyCorpus("no benign files supplied")
    images = []
    digests = []
    warnings = []
    for path in sorted(str(p) for p in corpus):
        data = Path(path).read_bytes()
        try:
            images.append(parse_pe(data))
        except PeFormatError as error:
            logger.warning("Skipping %s: %s", path, error)
            warnings.append(f"{path}: {error}")
            continue
        digests.append(hashlib.sha256(data).hexdigest())
    if not images:
        raise EmptyCorpus("no benign file could be parsed")
    provenance = hashlib.sha256("\n".join(sorted(digests)).encode("utf-8")).hexdigest()
    dictionary = dictionary_from_images(images, provenance)
    logger.info(
        "Benign dictionary built from %d files: %d section and %d import buckets",
        len(images), len(dictionary.sections), len(dictionary.imports),
    )
    return BenignDictionary(dictionary.sections, dictionary.imports, provenance, tuple(warnings), config_digest)


def bucket_to_candidates(dictionary: BenignDictionary, bucket: int, space: Space) -> list:
    """Sorted candidates for a bucket; empty when the bucket is unrealizable"""
    if not space.contains(bucket):
        raise BucketOutOfRange(f"bucket {bucket} is not in the {space.value} space")
    table = dictionary.sections if space is Space.SECTION else dictionary.imports
    return list(table.get(bucket, ()))


def dictionary_coverage(dictionary: BenignDictionary, space: Space) -> float:
    """Fraction of the buckets of a space that have at least one candidate"""
    table = dictionary.sections if space is Space.SECTION else dictionary.imports
    return sum(1 for names in table.values() if names) / space.size


######################################################################
#  C S V
######################################################################
def features_frame(rows: Iterable[Tuple[FeatureVector, int, str]]) -> pd.DataFrame:
    """Feature rows as a frame with f0..f517, label and sample_id columns"""
    rows = list(rows)
    matrix = np.array([vector.values for vector, _, _ in rows]).reshape(len(rows), FEATURE_DIM)
    frame = pd.DataFrame(matrix, columns=FEATURE_COLUMNS)
    frame["label"] = [int(label) for _, label, _ in rows]
    frame["sample_id"] = [str(sample_id) for _, _, sample_id in rows]
    return frame


def write_feature_csv(path, frame: pd.DataFrame) -> None:
    """Writes a feature frame"""
    frame.to_csv(path, index=False)


def read_feature_csv(path) -> Tuple[np.ndarray, np.ndarray, List[str]]:
    """Reads a feature CSV into (X, y, sample_ids)"""
    frame = pd.read_csv(path, dtype={"sample_id": str})
    missing = [column for column in FEATURE_COLUMNS + ["label", "sample_id"] if column not in frame.columns]
    if missing:
        raise DimensionMismatch(f"feature file lacks columns {missing[:3]}")
    return (
        frame[FEATURE_COLUMNS].to_numpy(dtype=np.float64),
        frame["label"].to_numpy(dtype=np.int64),
        frame["sample_id"].tolist(),
    )

"""Word-level vocabulary extended with atomic POI tokens, and prompt rendering."""

import collections
import datetime
import logging
import pathlib
import re
from typing import Iterable, List, Optional, Sequence, Tuple, Union

from llmgpr.dataset import CheckInSequence, Poi, PoiTable
from llmgpr.errors import DataError, UsageError
from llmgpr.parser import TSVParser
from llmgpr.record import VocabRecord

logger = logging.getLogger(__name__)

PathLike = Union[str, pathlib.Path]

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = range(len(SPECIALS))

POI_TOKEN = "<poi_{}>"
RE_POI_TOKEN = re.compile(r"<poi_([^<>\s]+)>")
RE_TOKEN = re.compile(r"<poi_[^<>\s]+>|<[a-z]+>|\d+(?:\.\d+)?|\w+|[^\w\s]")

POI_TEMPLATE = (
    "Generate an embedding for the following Point of Interest (POI).\n"
    "Name: {name}\n"
    "Category: {category}\n"
    "Description: {description}\n"
    "Reviews: {reviews}\n"
    "Latitude: {lat:.4f}\n"
    "Longitude: {lon:.4f}\n"
    "Address: {address}"
)
SEQUENCE_HEADER = (
    "Generate an embedding for the provided check-in sequence, which has multiple "
    "check-in activities, and the format of a check-in activity is: (POIID, "
    "timestamp, temporal difference from previous check-in, spatial difference "
    "from previous check-in). The check-in sequence is: "
)
ITEM_SEPARATOR = ", "
UNKNOWN = "unknown"


def poi_token(poi_id: str) -> str:
    """Return the atomic token text of a POI."""
    return POI_TOKEN.format(poi_id)


def split_words(text: str) -> List[str]:
    """Split a text into word-level token strings.

    POI tokens are kept verbatim; everything else is lower-cased.
    """
    return [t if t.startswith("<poi_") else t.lower() for t in RE_TOKEN.findall(text)]


class Vocabulary:
    """Token ids: specials and words in [0, W), then one POI token per POI.

    The POI token of the i-th POI has id ``W + i`` and its embedding is row i
    of the POI embedding matrix.
    """

    def __init__(self, words: Sequence[str], poi_ids: Sequence[str]) -> None:
        if tuple(words[: len(SPECIALS)]) != SPECIALS:
            raise DataError("vocabulary must start with the special tokens")
        self.words = list(words)  # type: List[str]
        self.poi_ids = list(poi_ids)  # type: List[str]
        self.word_ids = {w: i for i, w in enumerate(self.words)}
        self.poi_rows = {p: i for i, p in enumerate(self.poi_ids)}
        if len(self.word_ids) < len(self.words):
            raise DataError("duplicate token in vocabulary")
        if len(self.poi_rows) < len(self.poi_ids):
            raise DataError("duplicate POI in vocabulary")

    @property
    def n_words(self) -> int:
        """Return W, the number of word ids including specials."""
        return len(self.words)

    @property
    def n_pois(self) -> int:
        """Return P, the number of POI tokens."""
        return len(self.poi_ids)

    def __len__(self) -> int:
        return self.n_words + self.n_pois

    def poi_token_id(self, poi_id: str) -> int:
        """Return the token id of a POI."""
        try:
            return self.n_words + self.poi_rows[poi_id]
        except KeyError:
            raise UsageError("POI {} is not in the vocabulary".format(poi_id)) from None

    def is_poi(self, token_id: int) -> bool:
        """Return whether the id is a POI token."""
        return self.n_words <= token_id < len(self)

    def token(self, token_id: int) -> str:
        """Return the token text of an id."""
        if token_id < self.n_words:
            return self.words[token_id]
        return poi_token(self.poi_ids[token_id - self.n_words])

    def tokenize(self, text: str) -> List[int]:
        """Convert text into token ids; unknown words become `<unk>`."""
        ids = []  # type: List[int]
        for t in split_words(text):
            match = RE_POI_TOKEN.fullmatch(t)
            if match and match.group(1) in self.poi_rows:
                ids.append(self.n_words + self.poi_rows[match.group(1)])
            else:
                ids.append(self.word_ids.get(t, UNK_ID))
        return ids

    def encode(self, text: str, bos: bool = True) -> List[int]:
        """Return token ids of a prompt, optionally led by `<bos>`."""
        return ([BOS_ID] if bos else []) + self.tokenize(text)

    def records(self) -> List[VocabRecord]:
        """Return rows of the serialized vocabulary."""
        return [VocabRecord(self.token(i), i) for i in range(len(self))]

    @classmethod
    def from_records(cls, records: Iterable[VocabRecord]) -> "Vocabulary":
        """Rebuild a vocabulary from serialized rows."""
        words = []  # type: List[str]
        pois = []  # type: List[str]
        for expected, rec in enumerate(sorted(records, key=lambda r: r.token_id)):
            if rec.token_id != expected:
                raise DataError("vocabulary ids are not contiguous", [rec.token_id])
            match = RE_POI_TOKEN.fullmatch(rec.token)
            if match:
                pois.append(match.group(1))
            elif pois:
                raise DataError("word token after POI tokens", [rec.token])
            else:
                words.append(rec.token)
        return cls(words, pois)

    @classmethod
    def read(cls, path: PathLike) -> "Vocabulary":
        """Read a `token<TAB>id` file."""
        return cls.from_records(r for _, r in TSVParser(VocabRecord).parse_file(path))


def build_vocab(
    pois: PoiTable, text_corpus: Iterable[str], min_freq: int = 2
) -> Vocabulary:
    """Build a vocabulary over corpus words with a frequency cutoff.

    Words are ordered by descending frequency, then alphabetically. POI
    tokens follow in POI-table order.
    """
    if not len(pois):
        raise UsageError("cannot build a vocabulary without POIs")
    counter = collections.Counter()  # type: collections.Counter
    for text in text_corpus:
        counter.update(t for t in split_words(text) if not RE_POI_TOKEN.fullmatch(t))
    for s in SPECIALS:
        counter.pop(s, None)
    words = sorted(
        (w for w, n in counter.items() if n >= min_freq), key=lambda w: (-counter[w], w)
    )
    vocab = Vocabulary(list(SPECIALS) + words, list(pois.keys()))
    logger.info(
        "Vocabulary: %d words (%d below cutoff), %d POI tokens",
        vocab.n_words,
        len(counter) - len(words),
        vocab.n_pois,
    )
    return vocab


# -----------------------------------------------------------------------------
# prompts
# -----------------------------------------------------------------------------
def render_poi_prompt(poi: Poi) -> str:
    """Return the POI-description prompt; absent fields read "unknown"."""
    return POI_TEMPLATE.format(
        name=poi.name or UNKNOWN,
        category=poi.category or UNKNOWN,
        description=poi.description or UNKNOWN,
        reviews=UNKNOWN,
        lat=poi.lat,
        lon=poi.lon,
        address=poi.address or UNKNOWN,
    )


def format_timestamp(ts: int) -> str:
    """Return a UTC timestamp as ``YYYY-MM-DD HH:MM``."""
    dt = datetime.datetime.fromtimestamp(ts, tz=datetime.timezone.utc)
    return dt.strftime("%Y-%m-%d %H:%M")


def render_item(
    poi_id: str,
    timestamp: int,
    temporal: int,
    spatial: float,
    pois: Optional[PoiTable] = None,
) -> str:
    """Return one ``(POIID, timestamp, dt, dd)`` tuple.

    Without `pois` the POI is its atomic token; with `pois` it is described by
    its category words instead.
    """
    who = poi_token(poi_id) if pois is None else pois[poi_id].category
    return "({}, {}, {:d}, {:.2f})".format(
        who, format_timestamp(timestamp), int(temporal), spatial
    )


def sequence_prompt_pieces(
    sequence: CheckInSequence, pois: Optional[PoiTable] = None
) -> List[str]:
    """Return the header and one piece per item; they concatenate to the prompt.

    Each piece after the first item starts with the separator, so the prompt
    of a prefix is a prefix of the prompt of the whole sequence.
    """
    if not len(sequence):
        raise UsageError("cannot render an empty sequence")
    pieces = [SEQUENCE_HEADER]
    for i, (p, t) in enumerate(sequence.items):
        item = render_item(
            p, t, sequence.temporal_deltas[i], sequence.spatial_deltas[i], pois
        )
        pieces.append(item if i == 0 else ITEM_SEPARATOR + item)
    return pieces


def render_sequence_prompt(
    sequence: CheckInSequence, pois: Optional[PoiTable] = None
) -> str:
    """Return the check-in sequence prompt."""
    return "".join(sequence_prompt_pieces(sequence, pois))


def encode_sequence_prompt(
    vocab: Vocabulary, sequence: CheckInSequence, pois: Optional[PoiTable] = None
) -> Tuple[List[int], List[int]]:
    """Return token ids of the sequence prompt and the end index of each item.

    ``ids[: ends[j]]`` is exactly the encoded prompt of the first j+1 items.
    """
    pieces = sequence_prompt_pieces(sequence, pois)
    ids = vocab.encode(pieces[0])
    ends = []  # type: List[int]
    for piece in pieces[1:]:
        ids.extend(vocab.tokenize(piece))
        ends.append(len(ids))
    return ids, ends

"""
Word-vector tables in the plain text format

    token f1 f2 ... fd

one token per line, single spaces, optional leading "count dim" header line.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, TextIO, Tuple, Union

import numpy as np

from core.errors import ContractError, DimensionError, ParseError

logger = logging.getLogger(__name__)

MAX_QUESTION_LEN = 14


class EmbeddingTable:
    """Immutable token -> vector map. Tokens are case-folded on insert and lookup."""

    oov_policy = "zero"

    def __init__(self, dim: int, vectors: Dict[str, np.ndarray]):
        if dim <= 0:
            raise ContractError(f"embedding dimension must be positive, got {dim}")
        self.dim = dim
        self._vectors: Dict[str, np.ndarray] = {}
        for token, vector in vectors.items():
            v = np.array(vector, dtype=np.float64)
            if v.shape != (dim,):
                raise DimensionError(f"vector for '{token}' has shape {v.shape}, expected ({dim},)")
            v.setflags(write=False)
            self._vectors.setdefault(token.casefold(), v)

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, token: str) -> bool:
        return token.casefold() in self._vectors

    @property
    def tokens(self) -> List[str]:
        return list(self._vectors)

    def lookup(self, token: str) -> Tuple[np.ndarray, bool]:
        """Return (vector, oov). Unknown tokens map to the zero vector."""
        if not token:
            raise ContractError("lookup of an empty token")
        vector = self._vectors.get(token.casefold())
        if vector is None:
            return np.zeros(self.dim), True
        return vector, False

    def embed_label(self, label: str) -> np.ndarray:
        """Mean of the known word vectors of a (possibly multi-word) label."""
        words = label.split()
        if not words:
            raise ContractError("class label is empty")
        known = [v for v, oov in (self.lookup(w) for w in words) if not oov]
        if not known:
            return np.zeros(self.dim)
        if len(known) == 1:
            return known[0].copy()
        return np.mean(known, axis=0)


def _parse_floats(fields: List[str], line_no: int) -> np.ndarray:
    try:
        values = np.array([float(f) for f in fields], dtype=np.float64)
    except ValueError:
        raise ParseError("non-numeric vector component", line=line_no) from None
    if not np.all(np.isfinite(values)):
        raise ParseError("vector component is not finite", line=line_no)
    return values


def _is_header(first: List[str], rows: List[List[str]], expected_dim: Optional[int]) -> bool:
    """
    A leading "<count> <dim>" line is a header only when the rows that follow
    agree with it; otherwise it is a one-component vector for a numeric token.
    """
    if len(first) != 2 or not all(f.isdigit() for f in first):
        return False
    count, dim = int(first[0]), int(first[1])
    if expected_dim is not None and dim != expected_dim:
        return False
    if not rows:
        return dim != 1
    if len(rows[0]) - 1 != dim:
        return False
    return dim != 1 or count == len(rows)


def load_embeddings(source: Union[str, Path, TextIO, Iterable[str]], expected_dim: Optional[int] = None) -> EmbeddingTable:
    """
    Parse a word-vector text file (or any iterable of lines).

    The dimension is taken from `expected_dim` or from the first data row.
    Duplicate tokens keep their first vector.
    """
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as handle:
            return load_embeddings(handle, expected_dim)

    rows: List[Tuple[int, List[str]]] = []
    for line_no, raw in enumerate(source, start=1):
        line = raw.rstrip("\n").rstrip("\r")
        if line.strip():
            rows.append((line_no, line.split(" ")))
    if rows and rows[0][0] == 1 and _is_header(rows[0][1], [f for _, f in rows[1:]], expected_dim):
        rows = rows[1:]

    dim = expected_dim
    vectors: Dict[str, np.ndarray] = {}
    duplicates = 0
    for line_no, fields in rows:
        token, values = fields[0], _parse_floats(fields[1:], line_no)
        if not token:
            raise ParseError("missing token", line=line_no)
        if dim is None:
            dim = values.size
        if values.size != dim:
            raise ParseError(f"expected {dim} components, found {values.size}", line=line_no)
        key = token.casefold()
        if key in vectors:
            duplicates += 1
            logger.warning("duplicate token '%s' at line %d ignored", token, line_no)
            continue
        vectors[key] = values

    if dim is None or dim == 0:
        raise ParseError("embedding source contains no vectors")
    logger.debug("loaded %d vectors of dim %d (%d duplicates)", len(vectors), dim, duplicates)
    return EmbeddingTable(dim, vectors)


def save_embeddings(table: EmbeddingTable, destination: Union[str, Path, TextIO], header: bool = False) -> None:
    """Write a table back out; floats use repr so a reload is exact."""
    if isinstance(destination, (str, Path)):
        with open(destination, "w", encoding="utf-8", newline="\n") as handle:
            save_embeddings(table, handle, header)
        return
    if header:
        destination.write(f"{len(table)} {table.dim}\n")
    for token in table.tokens:
        vector, _ = table.lookup(token)
        destination.write(token + " " + " ".join(repr(float(x)) for x in vector) + "\n")


@dataclass(frozen=True)
class QuestionFeatures:
    """Q padded to max_len rows; mask[j] is True for real tokens."""

    Q: np.ndarray
    mask: np.ndarray
    tokens: Tuple[str, ...]

    @property
    def length(self) -> int:
        return int(self.mask.sum())


def embed_question(table: EmbeddingTable, tokens: List[str], max_len: int = MAX_QUESTION_LEN) -> QuestionFeatures:
    """Embed the first max_len tokens; later rows stay zero and masked."""
    if not tokens:
        raise ContractError("question has no tokens")
    if max_len <= 0:
        raise ContractError(f"max_len must be positive, got {max_len}")
    kept = tuple(tokens[:max_len])
    Q = np.zeros((max_len, table.dim))
    mask = np.zeros(max_len, dtype=bool)
    for j, token in enumerate(kept):
        Q[j], _ = table.lookup(token)
        mask[j] = True
    return QuestionFeatures(Q=Q, mask=mask, tokens=kept)


def lookup(table: EmbeddingTable, token: str) -> Tuple[np.ndarray, bool]:
    return table.lookup(token)


def embed_label(table: EmbeddingTable, label: str) -> np.ndarray:
    return table.embed_label(label)

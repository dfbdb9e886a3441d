"""A compact decoder-only sequence model standing in for the frozen base.

Before freezing, the attention and feed-forward projections are ordinary
`torch.nn.Linear` layers trained by next-token prediction. `BaseModel.freeze`
replaces each with a `QuantizedLinear` and turns every parameter off; from
then on only adapters and external embedding tables are trained.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy
import torch
import torch.nn.functional as F
from torch import nn

from llmgpr.dataset import PoiTable
from llmgpr.errors import DivergenceError, UsageError
from llmgpr.qlora import DEFAULT_BITS, AdapterSet, QuantizedLinear, quantize_linear
from llmgpr.vocab import PAD_ID, UNK_ID, Vocabulary, render_poi_prompt

logger = logging.getLogger(__name__)

LINEAR_NAMES = ("q", "k", "v", "o", "up", "down")
Linear = Union[nn.Linear, QuantizedLinear]
Tokens = Union[torch.Tensor, Sequence[int]]


@dataclass(frozen=True)
class ModelConfig:
    """Size of the base model and its pretraining budget."""

    d: int = 128
    n_layers: int = 4
    n_heads: int = 4
    ff_width: int = 512
    max_positions: int = 1024
    dropout: float = 0.1
    min_freq: int = 2
    pretrain_epochs: int = 3
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 16

    def __post_init__(self) -> None:
        for name in (
            "d",
            "n_layers",
            "n_heads",
            "ff_width",
            "max_positions",
            "pretrain_epochs",
            "pretrain_batch",
        ):
            if getattr(self, name) <= 0:
                raise UsageError("model.{} must be positive".format(name))
        if self.d % self.n_heads:
            raise UsageError("model.d must be divisible by model.n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise UsageError("model.dropout must be in [0, 1)")

    @classmethod
    def from_section(cls, section: Any) -> "ModelConfig":
        """Build from a `[model]` config section."""
        return cls(
            d=section.get_int("d"),
            n_layers=section.get_int("n_layers"),
            n_heads=section.get_int("n_heads"),
            ff_width=section.get_int("ff_width"),
            max_positions=section.get_int("max_positions"),
            dropout=section.get_float("dropout"),
            min_freq=section.get_int("min_freq"),
            pretrain_epochs=section.get_int("pretrain_epochs"),
            pretrain_lr=section.get_float("pretrain_lr"),
            pretrain_batch=section.get_int("pretrain_batch"),
        )


class DecoderLayer(nn.Module):
    """Pre-norm block: multi-head self-attention then a GELU feed-forward."""

    def __init__(self, config: ModelConfig, index: int) -> None:
        super().__init__()
        d = config.d
        self.index = index
        self.n_heads = config.n_heads
        self.ln1 = nn.LayerNorm(d)
        self.ln2 = nn.LayerNorm(d)
        self.q = nn.Linear(d, d)  # type: Linear
        self.k = nn.Linear(d, d)  # type: Linear
        self.v = nn.Linear(d, d)  # type: Linear
        self.o = nn.Linear(d, d)  # type: Linear
        self.up = nn.Linear(d, config.ff_width)  # type: Linear
        self.down = nn.Linear(config.ff_width, d)  # type: Linear
        self.drop = nn.Dropout(config.dropout)

    def path(self, name: str) -> str:
        """Return the adapter key of one of the layer's projections."""
        return "layers.{}.{}".format(self.index, name)

    def _linear(
        self, name: str, x: torch.Tensor, adapters: Optional[AdapterSet]
    ) -> torch.Tensor:
        layer = getattr(self, name)
        if isinstance(layer, QuantizedLinear):
            return layer(x, adapters.get(self.path(name)) if adapters else None)
        return layer(x)  # type: ignore

    def attention(
        self,
        x: torch.Tensor,
        adapters: Optional[AdapterSet],
        causal: bool,
        pad_mask: Optional[torch.Tensor],
    ) -> torch.Tensor:
        """Return the attention sublayer output for x of shape (B, T, d)."""
        n_batch, n_pos, d = x.shape
        dh = d // self.n_heads

        def heads(t: torch.Tensor) -> torch.Tensor:
            return t.view(n_batch, n_pos, self.n_heads, dh).transpose(1, 2)

        q = heads(self._linear("q", x, adapters))
        k = heads(self._linear("k", x, adapters))
        v = heads(self._linear("v", x, adapters))
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(dh)
        mask = torch.zeros(n_batch, 1, n_pos, n_pos, dtype=torch.bool, device=x.device)
        if causal:
            mask = mask | torch.ones(n_pos, n_pos, dtype=torch.bool).triu(1)
        if pad_mask is not None:
            mask = mask | pad_mask[:, None, None, :]
        scores = scores.masked_fill(mask, float("-inf"))
        weights = self.drop(torch.softmax(scores, dim=-1))
        out = (weights @ v).transpose(1, 2).reshape(n_batch, n_pos, d)
        return self._linear("o", out, adapters)

    def forward(  # type: ignore
        self,
        x: torch.Tensor,
        adapters: Optional[AdapterSet] = None,
        causal: bool = True,
        pad_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        x = x + self.drop(self.attention(self.ln1(x), adapters, causal, pad_mask))
        h = F.gelu(self._linear("up", self.ln2(x), adapters))
        return x + self.drop(self._linear("down", h, adapters))


class BaseModel(nn.Module):
    """Word embeddings, learned positions, decoder layers, and a final norm.

    Token ids below ``vocab.n_words`` are looked up in the word table; POI
    token ids are looked up in an external POI embedding matrix, or read as
    `<unk>` when none is given. The language-model head is tied to the word
    table and only used by `pretrain_base`.
    """

    def __init__(self, config: ModelConfig, vocab: Vocabulary) -> None:
        super().__init__()
        self.config = config
        self.vocab = vocab
        self.word_emb = nn.Embedding(vocab.n_words, config.d)
        self.pos_emb = nn.Embedding(config.max_positions, config.d)
        self.layers = nn.ModuleList(
            [DecoderLayer(config, i) for i in range(config.n_layers)]
        )
        self.ln_f = nn.LayerNorm(config.d)
        self.drop = nn.Dropout(config.dropout)
        self.frozen = False
        self.bits = None  # type: Optional[int]
        self.pretrain_losses = []  # type: List[float]

    # ------------------------------------------------------------------ layers
    def linear_layers(self) -> Iterator[Tuple[str, Linear]]:
        """Yield (path, module) of every projection, in a fixed order."""
        for layer in self.layers:
            for name in LINEAR_NAMES:
                yield layer.path(name), getattr(layer, name)

    def quantized_layers(self) -> Iterator[Tuple[str, QuantizedLinear]]:
        """Yield (path, module) of the quantized projections."""
        for path, module in self.linear_layers():
            if isinstance(module, QuantizedLinear):
                yield path, module

    def freeze(self, b: int = DEFAULT_BITS) -> None:
        """Quantize every projection to b bits and stop all gradients."""
        if self.frozen:
            return
        for layer in self.layers:
            for name in LINEAR_NAMES:
                setattr(layer, name, quantize_linear(getattr(layer, name), b))
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        self.bits = b
        self.eval()
        logger.info("Base model quantized to %d bits and frozen", b)

    def frozen_structure(self, b: int) -> None:
        """Replace projections with empty quantized layers, to load a checkpoint."""
        for layer in self.layers:
            for name in LINEAR_NAMES:
                lin = getattr(layer, name)
                d_out, d_in = lin.weight.shape
                quantized = QuantizedLinear(d_out, d_in, b, lin.bias is not None)
                setattr(layer, name, quantized)
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        self.bits = b
        self.eval()

    # ----------------------------------------------------------------- forward
    def embed(
        self, tokens: torch.Tensor, poi_embeddings: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        """Return token embeddings for ids of shape (B, T)."""
        n_words = self.vocab.n_words
        is_poi = tokens >= n_words
        word_ids = torch.where(is_poi, torch.full_like(tokens, UNK_ID), tokens)
        x = self.word_emb(word_ids)
        if poi_embeddings is not None and bool(is_poi.any()):
            rows = (tokens - n_words).clamp(min=0)
            x = torch.where(is_poi.unsqueeze(-1), poi_embeddings[rows].to(x.dtype), x)
        return x

    def run_layers(
        self,
        x: torch.Tensor,
        adapters: Optional[AdapterSet] = None,
        causal: bool = True,
        pad_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Run the decoder stack and the final norm on inputs of shape (B, T, d)."""
        for layer in self.layers:
            x = layer(x, adapters, causal, pad_mask)
        return self.ln_f(x)  # type: ignore

    def forward(  # type: ignore
        self,
        tokens: Tokens,
        adapters: Optional[AdapterSet] = None,
        poi_embeddings: Optional[torch.Tensor] = None,
        pad_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Return final-layer hidden states.

        A 1-D token sequence gives states of shape (T, d); a (B, T) batch gives
        (B, T, d).
        """
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        single = tokens.dim() == 1
        if single:
            tokens = tokens.unsqueeze(0)
        n_pos = tokens.shape[1]
        if n_pos > self.config.max_positions:
            raise UsageError(
                "prompt of {} tokens exceeds max_positions={}; truncate the "
                "sequence first".format(n_pos, self.config.max_positions)
            )
        pos = torch.arange(n_pos)
        x = self.drop(self.embed(tokens, poi_embeddings) + self.pos_emb(pos))
        h = self.run_layers(x, adapters, True, pad_mask)
        return h[0] if single else h

    def logits(self, hidden: torch.Tensor) -> torch.Tensor:
        """Return next-word logits from the tied word table."""
        return hidden @ self.word_emb.weight.t()


# -----------------------------------------------------------------------------
# pretraining
# -----------------------------------------------------------------------------
def _pad_batch(rows: Sequence[Sequence[int]]) -> Tuple[torch.Tensor, torch.Tensor]:
    width = max(len(r) for r in rows)
    tokens = torch.full((len(rows), width), PAD_ID, dtype=torch.long)
    for i, r in enumerate(rows):
        tokens[i, : len(r)] = torch.as_tensor(r, dtype=torch.long)
    return tokens, tokens == PAD_ID


def pretrain_base(
    prompts: Sequence[str],
    vocab: Vocabulary,
    config: ModelConfig,
    seed: int = 0,
    bits: int = DEFAULT_BITS,
) -> BaseModel:
    """Train a fresh model by next-token prediction, then quantize and freeze it.

    POI tokens are read as `<unk>`; the model only learns the word side of the
    prompts. The per-step losses are kept in ``pretrain_losses``.
    """
    if not prompts:
        raise UsageError("pretraining needs a non-empty prompt corpus")
    torch.manual_seed(seed)
    model = BaseModel(config, vocab)
    rows = []  # type: List[List[int]]
    for text in prompts:
        ids = vocab.encode(text)[: config.max_positions]
        ids = [UNK_ID if vocab.is_poi(i) else i for i in ids]
        if len(ids) >= 2:
            rows.append(ids)
    if not rows:
        raise UsageError("pretraining prompts are too short")
    optimizer = torch.optim.Adam(model.parameters(), lr=config.pretrain_lr)
    rng = numpy.random.default_rng(seed)
    model.train()
    step = 0
    for epoch in range(config.pretrain_epochs):
        order = rng.permutation(len(rows))
        total = 0.0
        for start in range(0, len(order), config.pretrain_batch):
            batch = [rows[i] for i in order[start : start + config.pretrain_batch]]
            tokens, pad = _pad_batch(batch)
            hidden = model(tokens[:, :-1], pad_mask=pad[:, :-1])
            loss = F.cross_entropy(
                model.logits(hidden).reshape(-1, vocab.n_words),
                tokens[:, 1:].reshape(-1),
                ignore_index=PAD_ID,
            )
            if not torch.isfinite(loss):
                raise DivergenceError("pretrain", step)
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), 1.0)
            optimizer.step()
            model.pretrain_losses.append(float(loss))
            total += float(loss) * len(batch)
            step += 1
        logger.info(
            "pretrain epoch %d/%d: loss %.4f",
            epoch + 1,
            config.pretrain_epochs,
            total / len(rows),
        )
    model.freeze(bits)
    return model


# -----------------------------------------------------------------------------
# POI embeddings
# -----------------------------------------------------------------------------
def init_poi_embeddings(base: BaseModel, pois: PoiTable) -> torch.Tensor:
    """Return the (P, d) matrix of mean final-layer states of each POI prompt.

    Rows follow the vocabulary's POI order. Prompts of equal length are run
    as one batch, so no padding enters the means.
    """
    vocab = base.vocab
    encoded = [vocab.encode(render_poi_prompt(pois[p])) for p in vocab.poi_ids]
    by_length = {}  # type: Dict[int, List[int]]
    for row, ids in enumerate(encoded):
        by_length.setdefault(len(ids), []).append(row)
    out = torch.zeros(vocab.n_pois, base.config.d)
    was_training = base.training
    base.eval()
    with torch.no_grad():
        for n in sorted(by_length):
            rows = by_length[n]
            tokens = torch.as_tensor([encoded[r] for r in rows], dtype=torch.long)
            out[rows] = base(tokens).mean(dim=1).to(out.dtype)
    base.train(was_training)
    if not torch.isfinite(out).all():
        raise DivergenceError("init-poi-emb", 0)
    logger.info("Initialized %d POI embeddings of width %d", *out.shape)
    return out

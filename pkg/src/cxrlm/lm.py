"""Unified text+image vocabulary and a small decoder-only transformer.

Sequence layouts are pinned bit-exactly (condition_mask true through SEP,
targets are the mask-false positions, next-token objective):

  pair_i2t:       [BOS, IMG, z.., /IMG, SEP, text.., EOS]
  pair_t2i:       [BOS, text.., SEP, IMG, z.., /IMG, EOS]
  cxr_to_report:  [BOS, T_rep, instr.., IMG, z.., /IMG, SEP, report.., EOS]
  report_to_cxr:  [BOS, T_img, instr.., report.., SEP, IMG, z.., /IMG, EOS]
  vqa:            [BOS, T_vqa, IMG, z.., /IMG, question.., SEP, answer.., EOS]

With task instructions ablated, the task marker and the rendered
instruction/question tokens are replaced by PAD in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import engine as eg
from .engine import Tensor
from .seeding import make_rng

TEXT, IMAGE, SPECIAL = 0, 1, 2

BOS, EOS, SEP, IMG_START, IMG_END, PAD = "<bos>", "<eos>", "<sep>", "<img>", "</img>", "<pad>"
TASK_MARKERS = {"cxr_to_report": "<task:report>", "report_to_cxr": "<task:image>", "vqa": "<task:vqa>"}
DEFAULT_SPECIALS = (BOS, EOS, SEP, IMG_START, IMG_END, PAD,
                    TASK_MARKERS["cxr_to_report"], TASK_MARKERS["report_to_cxr"], TASK_MARKERS["vqa"])

TASKS = ("cxr_to_report", "report_to_cxr", "vqa")
PAIR_DIRECTIONS = ("pair_i2t", "pair_t2i")


class SequenceError(ValueError):
    """A sequence violates the layout contract (length, spans, ranges)."""


# -- unified vocabulary ----------------------------------------------------------

@dataclass(frozen=True)
class UnifiedVocab:
    words: tuple  # sorted text vocabulary
    codebook_size: int
    specials: tuple

    def __post_init__(self):
        object.__setattr__(self, "_word_ids", {w: i for i, w in enumerate(self.words)})
        object.__setattr__(self, "_special_ids",
                           {s: self.text_size + self.codebook_size + i
                            for i, s in enumerate(self.specials)})

    @property
    def text_size(self):
        return len(self.words)

    @property
    def size(self):
        return self.text_size + self.codebook_size + len(self.specials)

    def word_id(self, word: str) -> int:
        if word not in self._word_ids:
            raise SequenceError(f"word {word!r} is not in the text vocabulary")
        return self._word_ids[word]

    def encode_text(self, tokens) -> np.ndarray:
        return np.array([self.word_id(t) for t in tokens], dtype=np.int64)

    def image_id(self, code: int) -> int:
        if not 0 <= code < self.codebook_size:
            raise SequenceError(f"image code {code} outside [0, {self.codebook_size})")
        return self.text_size + code

    def encode_image(self, codes) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        if codes.size and (codes.min() < 0 or codes.max() >= self.codebook_size):
            raise SequenceError(f"image codes outside [0, {self.codebook_size})")
        return self.text_size + codes

    def special(self, name: str) -> int:
        return self._special_ids[name]

    def modality_of(self, token_id: int) -> int:
        if 0 <= token_id < self.text_size:
            return TEXT
        if token_id < self.text_size + self.codebook_size:
            return IMAGE
        if token_id < self.size:
            return SPECIAL
        raise SequenceError(f"id {token_id} outside the vocabulary (size {self.size})")

    def decode(self, ids) -> list:
        out = []
        for i in ids:
            m = self.modality_of(int(i))
            if m == TEXT:
                out.append(self.words[int(i)])
            elif m == IMAGE:
                out.append(f"<code:{int(i) - self.text_size}>")
            else:
                out.append(self.specials[int(i) - self.text_size - self.codebook_size])
        return out

    def text_token_ids(self) -> np.ndarray:
        return np.arange(self.text_size, dtype=np.int64)

    def image_token_ids(self) -> np.ndarray:
        return np.arange(self.text_size, self.text_size + self.codebook_size, dtype=np.int64)


def build_vocab(grammar_vocab, codebook_size: int, specials=DEFAULT_SPECIALS) -> UnifiedVocab:
    """Deterministic layout: sorted text words, then image ids, then specials."""
    words = sorted(grammar_vocab)
    if len(set(words)) != len(words):
        dupes = sorted({w for w in words if words.count(w) > 1})
        raise SequenceError(f"duplicate words in the text vocabulary: {dupes}")
    if codebook_size <= 0:
        raise SequenceError(f"codebook size must be positive, got {codebook_size}")
    if len(set(specials)) != len(specials):
        raise SequenceError("duplicate special tokens")
    return UnifiedVocab(tuple(words), int(codebook_size), tuple(specials))


# -- token sequences ----------------------------------------------------------------

@dataclass
class TokenSequence:
    ids: np.ndarray
    tags: np.ndarray
    condition_mask: np.ndarray  # True = conditioning, excluded from the loss

    def __len__(self):
        return len(self.ids)

    def target_count(self) -> int:
        return int((~self.condition_mask).sum())

    def validate(self, vocab: UnifiedVocab, grid_len: int) -> None:
        if not (len(self.ids) == len(self.tags) == len(self.condition_mask)):
            raise SequenceError("ids, tags and condition_mask lengths differ")
        for i, token_id in enumerate(self.ids):
            if vocab.modality_of(int(token_id)) != self.tags[i]:
                raise SequenceError(f"tag at position {i} does not match id range")
        start_id, end_id = vocab.special(IMG_START), vocab.special(IMG_END)
        i = 0
        while i < len(self.ids):
            if self.ids[i] == start_id:
                span = self.ids[i + 1:i + 1 + grid_len]
                if len(span) != grid_len or not all(self.tags[i + 1 + j] == IMAGE for j in range(grid_len)):
                    raise SequenceError(f"image span at {i} is not exactly {grid_len} image tokens")
                if i + 1 + grid_len >= len(self.ids) or self.ids[i + 1 + grid_len] != end_id:
                    raise SequenceError(f"image span at {i} is not closed by {IMG_END}")
                i += grid_len + 2
            else:
                if self.tags[i] == IMAGE:
                    raise SequenceError(f"image token outside an image span at position {i}")
                i += 1


def _tags_for(vocab: UnifiedVocab, ids) -> np.ndarray:
    return np.array([vocab.modality_of(int(i)) for i in ids], dtype=np.int8)


def assemble_sequence(task: str, vocab: UnifiedVocab, *, image_tokens=None, text_tokens=None,
                      instruction=None, question_tokens=None, answer_tokens=None,
                      context: int = 192, grid_len: int = 64,
                      use_instructions: bool = True) -> TokenSequence:
    """Build the documented layout for a task or stage-1 pair direction."""
    sp = vocab.special

    def img_span():
        if image_tokens is None:
            raise SequenceError(f"task {task} needs image tokens")
        codes = vocab.encode_image(np.asarray(image_tokens).reshape(-1))
        if codes.size != grid_len:
            raise SequenceError(f"image span must be {grid_len} tokens, got {codes.size}")
        return [sp(IMG_START)], codes, [sp(IMG_END)]

    def text_ids(tokens, what):
        if tokens is None:
            raise SequenceError(f"task {task} needs {what} tokens")
        return list(vocab.encode_text(tokens))

    if task in TASK_MARKERS:
        prefix = [sp(BOS), sp(TASK_MARKERS[task])]
        instr_ids = text_ids(list(instruction or []), "instruction") if task != "vqa" else []
    elif task in PAIR_DIRECTIONS:
        prefix = [sp(BOS)]
        instr_ids = []
    else:
        raise SequenceError(f"unknown task {task!r}; expected one of {TASKS + PAIR_DIRECTIONS}")

    if task in ("cxr_to_report", "pair_i2t"):
        a, z, b = img_span()
        report = text_ids(text_tokens, "report")
        ids = prefix + instr_ids + a + list(z) + b + [sp(SEP)] + report + [sp(EOS)]
        sep_pos = len(prefix) + len(instr_ids) + grid_len + 2
    elif task in ("report_to_cxr", "pair_t2i"):
        report = text_ids(text_tokens, "report")
        a, z, b = img_span()
        ids = prefix + instr_ids + report + [sp(SEP)] + a + list(z) + b + [sp(EOS)]
        sep_pos = len(prefix) + len(instr_ids) + len(report)
    else:  # vqa
        a, z, b = img_span()
        question = text_ids(question_tokens, "question")
        answer = text_ids(answer_tokens, "answer")
        ids = prefix + a + list(z) + b + question + [sp(SEP)] + answer + [sp(EOS)]
        sep_pos = len(prefix) + grid_len + 2 + len(question)

    if len(ids) > context:
        raise SequenceError(f"sequence length {len(ids)} exceeds context {context} for task {task}")

    ids = np.array(ids, dtype=np.int64)
    if not use_instructions and task in TASK_MARKERS:
        pad_id = sp(PAD)
        ids[1] = pad_id  # task marker
        if task == "vqa":
            q_start = 2 + grid_len + 2
            ids[q_start:sep_pos] = pad_id
        elif instr_ids:
            ids[2:2 + len(instr_ids)] = pad_id

    mask = np.zeros(len(ids), dtype=bool)
    mask[:sep_pos + 1] = True
    seq = TokenSequence(ids, _tags_for(vocab, ids), mask)
    seq.validate(vocab, grid_len)
    return seq


def build_condition(task: str, vocab: UnifiedVocab, *, image_tokens=None, text_tokens=None,
                    instruction=None, question_tokens=None, grid_len: int = 64,
                    use_instructions: bool = True) -> np.ndarray:
    """The conditioning prefix for generation.

    Text targets condition through SEP; the image target conditions through
    IMG_START so decoding fills exactly the bracketed span.
    """
    placeholder_answer = [] if task != "report_to_cxr" else None
    dummy_image = np.zeros(grid_len, dtype=np.int64)
    if task == "cxr_to_report":
        seq = assemble_sequence(task, vocab, image_tokens=image_tokens, text_tokens=[],
                                instruction=instruction, grid_len=grid_len,
                                use_instructions=use_instructions)
        return seq.ids[:int(np.flatnonzero(seq.condition_mask).max()) + 1]
    if task == "vqa":
        seq = assemble_sequence(task, vocab, image_tokens=image_tokens,
                                question_tokens=question_tokens, answer_tokens=[],
                                grid_len=grid_len, use_instructions=use_instructions)
        return seq.ids[:int(np.flatnonzero(seq.condition_mask).max()) + 1]
    if task == "report_to_cxr":
        seq = assemble_sequence(task, vocab, image_tokens=dummy_image, text_tokens=text_tokens,
                                instruction=instruction, grid_len=grid_len,
                                use_instructions=use_instructions)
        sep_pos = int(np.flatnonzero(seq.condition_mask).max())
        return seq.ids[:sep_pos + 2]  # through IMG_START
    raise SequenceError(f"unknown generation task {task!r}")


# -- model -----------------------------------------------------------------------------

@dataclass
class LmConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ff_mult: int = 4
    context: int = 192
    init_scale: float = 0.02

    @property
    def head_dim(self):
        if self.d_model % self.n_heads:
            raise eg.ShapeError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        return self.d_model // self.n_heads


def init_lm(vocab_size: int, cfg: LmConfig, seed: int = 0) -> dict:
    rng = make_rng(seed, "lm-init")
    d, s = cfg.d_model, cfg.init_scale

    def mat(*shape):
        return Tensor(rng.normal(0.0, s, size=shape), tracked=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), tracked=True)

    def ones(*shape):
        return Tensor(np.ones(shape), tracked=True)

    params = {"tok_emb": mat(vocab_size, d), "pos_emb": mat(cfg.context, d)}
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        params[p + "ln1_g"], params[p + "ln1_b"] = ones(d), zeros(d)
        params[p + "wq"], params[p + "bq"] = mat(d, d), zeros(d)
        params[p + "wk"], params[p + "bk"] = mat(d, d), zeros(d)
        params[p + "wv"], params[p + "bv"] = mat(d, d), zeros(d)
        params[p + "wo"], params[p + "bo"] = mat(d, d), zeros(d)
        params[p + "ln2_g"], params[p + "ln2_b"] = ones(d), zeros(d)
        params[p + "ff1_w"], params[p + "ff1_b"] = mat(d, d * cfg.ff_mult), zeros(d * cfg.ff_mult)
        params[p + "ff2_w"], params[p + "ff2_b"] = mat(d * cfg.ff_mult, d), zeros(d)
    params["ln_f_g"], params["ln_f_b"] = ones(d), zeros(d)
    params["out_w"], params["out_b"] = mat(d, vocab_size), zeros(vocab_size)
    return params


@lru_cache(maxsize=8)
def _causal_bias(t: int) -> np.ndarray:
    bias = np.zeros((t, t))
    bias[np.triu_indices(t, k=1)] = -1e30
    return bias


def lm_trunk(ids, params: dict, cfg: LmConfig) -> Tensor:
    """Token ids (B, T) -> final hidden states (B, T, d). Causal by construction."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None]
    b, t = ids.shape
    if t > cfg.context:
        raise SequenceError(f"sequence length {t} exceeds context {cfg.context}")
    vocab_size = params["tok_emb"].shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise SequenceError(f"token id outside the vocabulary (size {vocab_size})")

    x = eg.add(eg.gather_rows(params["tok_emb"], ids),
               eg.gather_rows(params["pos_emb"], np.arange(t)))
    nh, hd = cfg.n_heads, cfg.head_dim
    bias = Tensor(_causal_bias(t))
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        h = eg.layer_norm(x, params[p + "ln1_g"], params[p + "ln1_b"])
        q = eg.add(eg.matmul(h, params[p + "wq"]), params[p + "bq"])
        k = eg.add(eg.matmul(h, params[p + "wk"]), params[p + "bk"])
        v = eg.add(eg.matmul(h, params[p + "wv"]), params[p + "bv"])
        q = eg.transpose(eg.reshape(q, (b, t, nh, hd)), (0, 2, 1, 3))
        k = eg.transpose(eg.reshape(k, (b, t, nh, hd)), (0, 2, 1, 3))
        v = eg.transpose(eg.reshape(v, (b, t, nh, hd)), (0, 2, 1, 3))
        scores = eg.mul(eg.matmul(q, eg.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        attn = eg.softmax(eg.add(scores, bias), axis=-1)
        ctx = eg.reshape(eg.transpose(eg.matmul(attn, v), (0, 2, 1, 3)), (b, t, cfg.d_model))
        x = eg.add(x, eg.add(eg.matmul(ctx, params[p + "wo"]), params[p + "bo"]))
        h2 = eg.layer_norm(x, params[p + "ln2_g"], params[p + "ln2_b"])
        ff = eg.gelu(eg.add(eg.matmul(h2, params[p + "ff1_w"]), params[p + "ff1_b"]))
        x = eg.add(x, eg.add(eg.matmul(ff, params[p + "ff2_w"]), params[p + "ff2_b"]))
    return eg.layer_norm(x, params["ln_f_g"], params["ln_f_b"])


def lm_forward(ids, params: dict, cfg: LmConfig) -> Tensor:
    """Token ids (B, T) -> logits (B, T, V)."""
    hidden = lm_trunk(ids, params, cfg)
    return eg.add(eg.matmul(hidden, params["out_w"]), params["out_b"])


def detach_params(params: dict) -> dict:
    """Untracked view of the parameters; inference skips the tape entirely."""
    return {k: Tensor(v.data) for k, v in params.items()}


# -- losses -----------------------------------------------------------------------------

def pad_batch(sequences, pad_id: int):
    """Right-pad to a rectangle; returns (ids (B,T), target_weights (B,T))."""
    max_len = max(len(s) for s in sequences)
    ids = np.full((len(sequences), max_len), pad_id, dtype=np.int64)
    weights = np.zeros((len(sequences), max_len))
    for r, s in enumerate(sequences):
        ids[r, :len(s)] = s.ids
        weights[r, :len(s)] = ~s.condition_mask
    return ids, weights


def sequence_nll(sequences, params: dict, cfg: LmConfig, pad_id: int) -> Tensor:
    """Mean next-token cross-entropy over all mask-false target positions.

    Only the rows that predict a target go through the output projection;
    conditioning positions never reach the (d x V) head.
    """
    if isinstance(sequences, TokenSequence):
        sequences = [sequences]
    ids, weights = pad_batch(sequences, pad_id)
    b, t = ids.shape
    # position p is a target when its mask is False; the predicting row is p-1
    predict_rows = np.zeros((b, t), dtype=bool)
    predict_rows[:, :-1] = weights[:, 1:] > 0
    flat_rows = np.flatnonzero(predict_rows.reshape(-1))
    if flat_rows.size == 0:
        raise eg.ContractError("all positions are masked as conditioning; nothing to score")
    targets = ids.reshape(-1)[flat_rows + 1]  # next token; predict rows never end a row
    hidden = lm_trunk(ids, params, cfg)
    picked = eg.gather_rows(eg.reshape(hidden, (b * t, cfg.d_model)), flat_rows)
    logits = eg.add(eg.matmul(picked, params["out_w"]), params["out_b"])
    ce = eg.cross_entropy_rows(logits, targets)
    return eg.tmean(ce)


def stage1_loss(image_token_batch, report_token_batch, params, cfg: LmConfig,
                vocab: UnifiedVocab, grid_len: int = 64) -> Tensor:
    """Both conditional directions on paired data, summed."""
    i2t, t2i = [], []
    for codes, report in zip(image_token_batch, report_token_batch):
        i2t.append(assemble_sequence("pair_i2t", vocab, image_tokens=codes, text_tokens=report,
                                     context=cfg.context, grid_len=grid_len))
        t2i.append(assemble_sequence("pair_t2i", vocab, image_tokens=codes, text_tokens=report,
                                     context=cfg.context, grid_len=grid_len))
    pad_id = vocab.special(PAD)
    return eg.add(sequence_nll(i2t, params, cfg, pad_id), sequence_nll(t2i, params, cfg, pad_id))


def task_loss(sequences, task: str, params, cfg: LmConfig, pad_id: int) -> Tensor:
    """Mean nll over one task's assembled batch."""
    if task not in TASKS:
        raise SequenceError(f"unknown task {task!r}; expected one of {TASKS}")
    return sequence_nll(sequences, params, cfg, pad_id)


def reg_loss(params: dict, anchor: dict) -> Tensor:
    """Sum of squared parameter drift from the anchor, over all parameters."""
    if sorted(params) != sorted(anchor):
        raise eg.ShapeError("parameter names do not match the anchor")
    total = None
    for name in sorted(params):
        p, a = params[name], anchor[name]
        if p.shape != a.shape:
            raise eg.ShapeError(f"{name}: {p.shape} vs anchor {a.shape}")
        term = eg.tsum(eg.power(eg.add(p, Tensor(-a.data)), 2))
        total = term if total is None else eg.add(total, term)
    return total


def total_loss(task_term: Tensor, recon_value: float, reg_term: Tensor, lambda_reg: float) -> Tensor:
    """task + reconstruction (a frozen-tokenizer constant) + lambda * reg."""
    return eg.add(eg.add(task_term, float(recon_value)), eg.mul(reg_term, float(lambda_reg)))


# -- generation ----------------------------------------------------------------------------

@dataclass
class DecodeConfig:
    mode: str = "greedy"  # greedy | sample
    temperature: float = 1.0
    max_len: int = 32
    target_modality: str = "text"  # text | image

    def __post_init__(self):
        if self.mode not in ("greedy", "sample"):
            raise ValueError(f"mode must be greedy or sample, got {self.mode!r}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.target_modality not in ("text", "image"):
            raise ValueError(f"target_modality must be text or image, got {self.target_modality!r}")


@dataclass
class Generated:
    ids: np.ndarray  # condition + new tokens
    new_ids: np.ndarray
    truncated: bool = False


def _pick(logits_row: np.ndarray, allowed: np.ndarray, decode: DecodeConfig, rng) -> int:
    masked = np.full_like(logits_row, -1e30)
    masked[allowed] = logits_row[allowed]
    if decode.mode == "greedy":
        return int(np.argmax(masked))
    shifted = (masked - masked.max()) / decode.temperature
    probs = np.exp(shifted)
    probs /= probs.sum()
    return int(rng.choice(len(probs), p=probs))


def generate(condition_ids, decode: DecodeConfig, params: dict, cfg: LmConfig,
             vocab: UnifiedVocab, grid_len: int = 64, rng=None) -> Generated:
    """Autoregressive extension with modality masking; greedy is deterministic."""
    condition_ids = np.asarray(condition_ids, dtype=np.int64)
    inference = detach_params(params)
    if decode.mode == "sample" and rng is None:
        rng = np.random.default_rng(0)

    if decode.target_modality == "image":
        needed = grid_len + 1
        if len(condition_ids) + needed > cfg.context:
            raise SequenceError(
                f"condition length {len(condition_ids)} leaves no room for {needed} image tokens")
        if condition_ids[-1] != vocab.special(IMG_START):
            raise SequenceError("image-mode condition must end with the image-span opener")
        ids = list(condition_ids)
        image_ids = vocab.image_token_ids()
        end_only = np.array([vocab.special(IMG_END)])
        for pos in range(needed):
            logits = lm_forward(np.array(ids, dtype=np.int64), inference, cfg).data[0, -1]
            allowed = image_ids if pos < grid_len else end_only
            ids.append(_pick(logits, allowed, decode, rng))
        full = np.array(ids, dtype=np.int64)
        return Generated(full, full[len(condition_ids):], truncated=False)

    allowed = np.concatenate([vocab.text_token_ids(), [vocab.special(EOS)]])
    eos = vocab.special(EOS)
    ids = list(condition_ids)
    new = []
    truncated = True
    budget = min(decode.max_len, cfg.context - len(condition_ids))
    for _ in range(budget):
        logits = lm_forward(np.array(ids, dtype=np.int64), inference, cfg).data[0, -1]
        token = _pick(logits, allowed, decode, rng)
        ids.append(token)
        new.append(token)
        if token == eos:
            truncated = False
            break
    return Generated(np.array(ids, dtype=np.int64), np.array(new, dtype=np.int64), truncated)

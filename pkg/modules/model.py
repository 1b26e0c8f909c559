# ---------------------------------------------------
# model.py - Backbone, PrefixBank and Prefix Attention
# ---------------------------------------------------
# A toy pre-norm encoder-decoder transformer standing
# in for a code pre-trained model. Every attention
# site (encoder self, decoder self, decoder cross)
# can receive a knowledge prefix: a key/value pair of
# [L x d_model] arrays prepended to that site's keys
# and values. The PrefixBank holds these pairs, either
# flat or generated by a small prefix encoder that is
# collapsed to flat arrays once source training ends.
# ---------------------------------------------------

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from modules import autodiff as ad
from modules.autodiff import DiffTensor
from modules.errors import CompatibilityError, ConfigError, InputError, ShapeError
from modules.seeding import array_digest, fingerprint, stream
from modules.tasks import BOS_ID, EOS_ID, PAD_ID

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    d_ff: int = 256
    max_source_len: int = 64
    max_target_len: int = 64
    prefix_length: int = 32
    dropout_rate: float = 0.1
    prefix_hidden_size: int = 128

    # Fields that decide the backbone parameter shapes
    BACKBONE_FIELDS = ("vocab_size", "d_model", "n_heads", "n_encoder_layers",
                       "n_decoder_layers", "d_ff", "max_source_len",
                       "max_target_len")

    def validate(self):
        """ Raises ConfigError on the first broken invariant, returns self. """
        positive = ("vocab_size", "d_model", "n_heads", "n_encoder_layers",
                    "n_decoder_layers", "d_ff", "max_source_len",
                    "max_target_len", "prefix_hidden_size")
        for name in positive:
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"model.{name} must be a positive integer, "
                                  f"got {value!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by "
                              f"n_heads={self.n_heads}")
        if not isinstance(self.prefix_length, int) or self.prefix_length < 0:
            raise ConfigError(f"prefix_length must be >= 0, got {self.prefix_length!r}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        return self

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    def to_dict(self):
        return asdict(self)

    def backbone_fields(self):
        return {name: getattr(self, name) for name in self.BACKBONE_FIELDS}

    def backbone_fingerprint(self):
        return fingerprint(self.backbone_fields())

    def attention_sites(self):
        """ Names of every attention module that receives a prefix pair. """
        sites = [f"encoder.{i}.self" for i in range(self.n_encoder_layers)]
        for i in range(self.n_decoder_layers):
            sites.extend([f"decoder.{i}.self", f"decoder.{i}.cross"])
        return sites


# -------------------
#  PARAMETER LAYOUT
# -------------------
def _norm_shapes(prefix, width):
    return [(f"{prefix}.gain", (width,)), (f"{prefix}.bias", (width,))]


def _attention_shapes(prefix, width):
    shapes = []
    for projection in ("q", "k", "v", "o"):
        shapes.append((f"{prefix}.{projection}.weight", (width, width)))
        shapes.append((f"{prefix}.{projection}.bias", (width,)))
    return shapes


def _ffn_shapes(prefix, width, hidden):
    return [(f"{prefix}.in.weight", (width, hidden)), (f"{prefix}.in.bias", (hidden,)),
            (f"{prefix}.out.weight", (hidden, width)), (f"{prefix}.out.bias", (width,))]


def backbone_shapes(config):
    """ Ordered (name, shape) list; the order is the registration order. """
    d, hidden, vocab = config.d_model, config.d_ff, config.vocab_size
    shapes = [("embed_tokens", (vocab, d)),
              ("encoder.positions", (config.max_source_len, d)),
              ("decoder.positions", (config.max_target_len, d))]
    for i in range(config.n_encoder_layers):
        layer = f"encoder.layers.{i}"
        shapes += _norm_shapes(f"{layer}.self_attn_norm", d)
        shapes += _attention_shapes(f"{layer}.self_attn", d)
        shapes += _norm_shapes(f"{layer}.ffn_norm", d)
        shapes += _ffn_shapes(f"{layer}.ffn", d, hidden)
    for i in range(config.n_decoder_layers):
        layer = f"decoder.layers.{i}"
        shapes += _norm_shapes(f"{layer}.self_attn_norm", d)
        shapes += _attention_shapes(f"{layer}.self_attn", d)
        shapes += _norm_shapes(f"{layer}.cross_attn_norm", d)
        shapes += _attention_shapes(f"{layer}.cross_attn", d)
        shapes += _norm_shapes(f"{layer}.ffn_norm", d)
        shapes += _ffn_shapes(f"{layer}.ffn", d, hidden)
    shapes += _norm_shapes("encoder.final_norm", d)
    shapes += _norm_shapes("decoder.final_norm", d)
    shapes += [("lm_head.weight", (d, vocab)), ("lm_head.bias", (vocab,))]
    return shapes


def uniform_init(rng, shape, fan_in):
    """ Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], shared by backbone and prefix. """
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def _initial_value(rng, name, shape, d_model):
    if name.endswith(".gain"):
        return np.ones(shape)
    if name.endswith(".bias"):
        return np.zeros(shape)
    if name == "embed_tokens" or name.endswith("positions"):
        return uniform_init(rng, shape, d_model)
    return uniform_init(rng, shape, shape[0])


# -------------------
#  BACKBONE
# -------------------
class Backbone:

    def __init__(self, config, params, *, seed=None, provenance="random-init"):
        """
        The toy encoder-decoder. Parameters are kept in an insertion
        ordered dict so that optimizers, digests and checkpoints all
        walk them in the same registration order.
        """
        self.config = config
        self.params = params
        self.seed = seed
        self.provenance = provenance

    def __getitem__(self, name):
        return self.params[name]

    def parameters(self):
        return list(self.params.values())

    def named_arrays(self):
        return [(name, p.data) for name, p in self.params.items()]

    def parameter_count(self):
        return sum(p.size for p in self.params.values())

    def digest(self):
        return array_digest(self.named_arrays())


def init_backbone(config, seed):
    """ Initializes every backbone parameter from the seeded init stream. """
    config.validate()
    rng = stream(seed, "backbone-init")
    params = {}
    for name, shape in backbone_shapes(config):
        value = _initial_value(rng, name, shape, config.d_model)
        params[name] = DiffTensor(value, requires_grad=True, name=name)
    backbone = Backbone(config, params, seed=seed, provenance="random-init")
    logger.info("Initialized backbone with %d parameters (seed %d)",
                backbone.parameter_count(), seed)
    return backbone


# -------------------
#  PREFIX BANK
# -------------------
class PrefixEncoder:

    def __init__(self, params):
        """
        Reparameterization network: an [L x d_emb] embedding table
        passed through affine -> tanh -> affine, producing every
        site's key and value prefix in one [L x sites*2*d_model] block.
        """
        self.params = params

    @classmethod
    def initialize(cls, config, rng, n_sites):
        d, hidden = config.d_model, config.prefix_hidden_size
        width = n_sites * 2 * d
        shapes = [("prefix_encoder.embedding", (config.prefix_length, d), d),
                  ("prefix_encoder.dense_in.weight", (d, hidden), d),
                  ("prefix_encoder.dense_in.bias", (hidden,), None),
                  ("prefix_encoder.dense_out.weight", (hidden, width), hidden),
                  ("prefix_encoder.dense_out.bias", (width,), None)]
        params = {}
        for name, shape, fan_in in shapes:
            value = np.zeros(shape) if fan_in is None else uniform_init(rng, shape, fan_in)
            params[name] = DiffTensor(value, requires_grad=True, name=name)
        return cls(params)

    def parameters(self):
        return list(self.params.values())

    def forward(self):
        p = self.params
        hidden = ad.tanh(ad.add(ad.matmul(p["prefix_encoder.embedding"],
                                          p["prefix_encoder.dense_in.weight"]),
                                p["prefix_encoder.dense_in.bias"]))
        return ad.add(ad.matmul(hidden, p["prefix_encoder.dense_out.weight"]),
                      p["prefix_encoder.dense_out.bias"])


class PrefixBank:

    def __init__(self, config, *, keys=None, values=None, encoder=None,
                 seed=None, provenance="random"):
        """
        The universal knowledge prefix. Holds exactly one key/value
        pair per attention site, either as flat leaves (keys/values
        dicts keyed by site) or through a PrefixEncoder.
        """
        self.config = config
        self.sites = config.attention_sites()
        self.keys = keys or {}
        self.values = values or {}
        self.encoder = encoder
        self.seed = seed
        self.provenance = provenance
        if encoder is None:
            self._check_flat()

    @classmethod
    def initialize(cls, config, seed, *, reparameterize=False):
        """ Random knowledge theta_0, drawn with the backbone's init family. """
        config.validate()
        rng = stream(seed, "prefix-init")
        sites = config.attention_sites()
        if reparameterize:
            encoder = PrefixEncoder.initialize(config, rng, len(sites))
            return cls(config, encoder=encoder, seed=seed)
        shape = (config.prefix_length, config.d_model)
        keys, values = {}, {}
        for site in sites:
            keys[site] = DiffTensor(uniform_init(rng, shape, config.d_model),
                                    requires_grad=True, name=f"{site}.key")
            values[site] = DiffTensor(uniform_init(rng, shape, config.d_model),
                                      requires_grad=True, name=f"{site}.value")
        return cls(config, keys=keys, values=values, seed=seed)

    def _check_flat(self):
        shape = [self.config.prefix_length, self.config.d_model]
        if set(self.keys) != set(self.sites) or set(self.values) != set(self.sites):
            raise ShapeError("prefix bank needs exactly one key/value pair per site")
        for site in self.sites:
            if self.keys[site].shape != shape or self.values[site].shape != shape:
                raise ShapeError(f"prefix pair of {site} is not {shape}")

    @property
    def length(self):
        return self.config.prefix_length

    @property
    def reparameterized(self):
        return self.encoder is not None

    def parameters(self):
        if self.encoder is not None:
            return self.encoder.parameters()
        params = []
        for site in self.sites:
            params.extend([self.keys[site], self.values[site]])
        return params

    def named_arrays(self):
        if self.encoder is not None:
            return [(name, p.data) for name, p in self.encoder.params.items()]
        arrays = []
        for site in self.sites:
            arrays.append((f"{site}.key", self.keys[site].data))
            arrays.append((f"{site}.value", self.values[site].data))
        return arrays

    def site_prefixes(self):
        """ Mapping site -> (key_prefix, value_prefix), recorded on the tape. """
        if self.encoder is None:
            return {site: (self.keys[site], self.values[site]) for site in self.sites}
        block = self.encoder.forward()
        d = self.config.d_model
        prefixes = {}
        for index, site in enumerate(self.sites):
            start = 2 * index * d
            key = ad.take(block, (slice(None), slice(start, start + d)))
            value = ad.take(block, (slice(None), slice(start + d, start + 2 * d)))
            prefixes[site] = (key, value)
        return prefixes

    def collapse(self):
        """
        Materializes flat prefixes from the encoder and drops it.
        Forward outputs are unchanged; collapsing twice is a no-op.
        """
        if self.encoder is None:
            logger.warning("Prefix bank is already collapsed; nothing to do")
            return self
        with ad.no_grad():
            generated = self.site_prefixes()
        keys, values = {}, {}
        for site in self.sites:
            key, value = generated[site]
            keys[site] = DiffTensor(key.data, requires_grad=True, name=f"{site}.key",
                                    dtype=key.data.dtype)
            values[site] = DiffTensor(value.data, requires_grad=True,
                                      name=f"{site}.value", dtype=value.data.dtype)
        self.keys, self.values, self.encoder = keys, values, None
        self._check_flat()
        logger.info("Collapsed prefix encoder into %d flat site prefixes",
                    len(self.sites))
        return self

    def digest(self):
        return array_digest(self.named_arrays())


def collapse_prefix_encoder(prefix):
    """
    Replaces a reparameterized prefix by the flat per-site key/value
    prefixes its encoder produces. Outputs of the model are unchanged;
    the encoder weights are discarded. Flat prefixes pass through.
    """
    if prefix.reparameterized:
        return prefix.collapse()
    return prefix


def check_compatible(prefix, config):
    """ The prefix must fit the attention layout of the given model config. """
    mine = prefix.config
    for name in ("d_model", "n_heads", "n_encoder_layers", "n_decoder_layers"):
        if getattr(mine, name) != getattr(config, name):
            raise CompatibilityError(
                f"prefix {name}={getattr(mine, name)} does not match "
                f"backbone {name}={getattr(config, name)}")


# -------------------
#  ATTENTION
# -------------------
def attention_with_prefix(queries, keys, values, prefix_kv=None, mask=None, *,
                          return_weights=False):
    """
    Scaled dot-product attention over [prefix ; sequence].
    queries [B x H x T x dh], keys/values [B x H x S x dh],
    prefix_kv an optional (key, value) pair of [L x H*dh] arrays and
    mask a boolean array broadcastable to [B x 1 x T x S] (True = may
    attend). Prefix positions are never masked.
    """
    batch, heads, steps, head_dim = queries.data.shape
    length = 0
    if prefix_kv is not None:
        key_prefix, value_prefix = prefix_kv
        expected = heads * head_dim
        if (key_prefix.ndim != 2 or key_prefix.data.shape != value_prefix.data.shape
                or key_prefix.data.shape[1] != expected):
            raise ShapeError(f"prefix pair {key_prefix.shape}/{value_prefix.shape} "
                             f"does not fit {heads} heads of width {head_dim}")
        length = key_prefix.data.shape[0]
        keys = ad.concat([_prefix_heads(key_prefix, batch, heads, head_dim), keys], axis=2)
        values = ad.concat([_prefix_heads(value_prefix, batch, heads, head_dim), values],
                           axis=2)

    scores = ad.scale(ad.matmul(queries, ad.transpose(keys, (0, 1, 3, 2))),
                      1.0 / math.sqrt(head_dim))
    if mask is not None:
        positions = keys.data.shape[2] - length
        allowed = np.broadcast_to(np.asarray(mask, dtype=bool),
                                  (batch, 1, steps, positions))
        if length:
            visible = np.ones((batch, 1, steps, length), dtype=bool)
            allowed = np.concatenate([visible, allowed], axis=3)
        scores = ad.add_constant(scores, np.where(allowed, 0.0, ad.MASK_VALUE))
    weights = ad.softmax(scores, axis=-1)
    output = ad.matmul(weights, values)
    if return_weights:
        return output, weights
    return output


def _prefix_heads(prefix, batch, heads, head_dim):
    length = prefix.data.shape[0]
    split = ad.transpose(ad.reshape(prefix, (length, heads, head_dim)), (1, 0, 2))
    return ad.repeat_batch(split, batch)


def _split_heads(x, heads):
    batch, steps, width = x.data.shape
    return ad.transpose(ad.reshape(x, (batch, steps, heads, width // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    batch, heads, steps, head_dim = x.data.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (batch, steps, heads * head_dim))


def _linear(backbone, name, x):
    return ad.add(ad.matmul(x, backbone[f"{name}.weight"]), backbone[f"{name}.bias"])


def _norm(backbone, name, x):
    return ad.layer_norm(x, backbone[f"{name}.gain"], backbone[f"{name}.bias"],
                         LAYER_NORM_EPS)


def _dropout(x, rate, rng):
    if rng is None or rate == 0:
        return x
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return ad.mul_constant(x, keep)


def _attention_block(backbone, name, query_in, memory_in, prefix_kv, mask):
    heads = backbone.config.n_heads
    q = _split_heads(_linear(backbone, f"{name}.q", query_in), heads)
    k = _split_heads(_linear(backbone, f"{name}.k", memory_in), heads)
    v = _split_heads(_linear(backbone, f"{name}.v", memory_in), heads)
    attended = attention_with_prefix(q, k, v, prefix_kv, mask)
    return _linear(backbone, f"{name}.o", _merge_heads(attended))


def _feed_forward(backbone, name, x):
    return _linear(backbone, f"{name}.out", ad.relu(_linear(backbone, f"{name}.in", x)))


# -------------------
#  FORWARD PASSES
# -------------------
def _check_tokens(tokens, limit, vocab_size, what):
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[1] == 0:
        raise InputError(f"{what} tokens must be a non-empty [batch x length] array")
    if tokens.shape[1] > limit:
        raise InputError(f"{what} length {tokens.shape[1]} exceeds the limit of {limit}")
    if tokens.min() < 0 or tokens.max() >= vocab_size:
        raise InputError(f"{what} token ids must lie in [0, {vocab_size})")
    return tokens


def _site_prefixes(backbone, prefix):
    if prefix is None:
        return {}
    check_compatible(prefix, backbone.config)
    return prefix.site_prefixes()


def encode(backbone, sites, source, *, rng=None):
    """ Runs the encoder; returns (memory, source key mask). """
    cfg = backbone.config
    steps = source.shape[1]
    x = ad.add(ad.embedding(backbone["embed_tokens"], source),
               ad.take(backbone["encoder.positions"], slice(0, steps)))
    x = _dropout(x, cfg.dropout_rate, rng)
    mask = (source != PAD_ID)[:, None, None, :]
    for i in range(cfg.n_encoder_layers):
        layer = f"encoder.layers.{i}"
        h = _norm(backbone, f"{layer}.self_attn_norm", x)
        h = _attention_block(backbone, f"{layer}.self_attn", h, h,
                             sites.get(f"encoder.{i}.self"), mask)
        x = ad.add(x, _dropout(h, cfg.dropout_rate, rng))
        h = _feed_forward(backbone, f"{layer}.ffn", _norm(backbone, f"{layer}.ffn_norm", x))
        x = ad.add(x, _dropout(h, cfg.dropout_rate, rng))
    return _norm(backbone, "encoder.final_norm", x), mask


def decode(backbone, sites, memory, source_mask, target_in, *, rng=None):
    """ Teacher-forced decoder pass; returns logits [B x T x vocab]. """
    cfg = backbone.config
    steps = target_in.shape[1]
    y = ad.add(ad.embedding(backbone["embed_tokens"], target_in),
               ad.take(backbone["decoder.positions"], slice(0, steps)))
    y = _dropout(y, cfg.dropout_rate, rng)
    causal = np.tril(np.ones((steps, steps), dtype=bool))[None, None]
    for i in range(cfg.n_decoder_layers):
        layer = f"decoder.layers.{i}"
        h = _norm(backbone, f"{layer}.self_attn_norm", y)
        h = _attention_block(backbone, f"{layer}.self_attn", h, h,
                             sites.get(f"decoder.{i}.self"), causal)
        y = ad.add(y, _dropout(h, cfg.dropout_rate, rng))
        h = _norm(backbone, f"{layer}.cross_attn_norm", y)
        h = _attention_block(backbone, f"{layer}.cross_attn", h, memory,
                             sites.get(f"decoder.{i}.cross"), source_mask)
        y = ad.add(y, _dropout(h, cfg.dropout_rate, rng))
        h = _feed_forward(backbone, f"{layer}.ffn", _norm(backbone, f"{layer}.ffn_norm", y))
        y = ad.add(y, _dropout(h, cfg.dropout_rate, rng))
    y = _norm(backbone, "decoder.final_norm", y)
    return _linear(backbone, "lm_head", y)


def forward(backbone, prefix, source, target, *, rng=None):
    """
    Teacher-forced logits [batch x target_len x vocab] for decoder
    inputs `target`. rng enables dropout; None runs deterministically.
    """
    cfg = backbone.config
    source = _check_tokens(source, cfg.max_source_len, cfg.vocab_size, "source")
    target = _check_tokens(target, cfg.max_target_len, cfg.vocab_size, "target")
    if source.shape[0] != target.shape[0]:
        raise InputError("source and target batches differ in size")
    sites = _site_prefixes(backbone, prefix)
    memory, mask = encode(backbone, sites, source, rng=rng)
    return decode(backbone, sites, memory, mask, target, rng=rng)


def sequence_loss(backbone, prefix, source, target, *, rng=None):
    """
    Cross-entropy of the shifted target: the decoder reads
    target[:, :-1] and predicts target[:, 1:]. Pad positions are ignored.
    """
    target = np.asarray(target, dtype=np.int64)
    logits = forward(backbone, prefix, source, target[:, :-1], rng=rng)
    vocab = backbone.config.vocab_size
    return ad.cross_entropy(ad.reshape(logits, (-1, vocab)),
                            target[:, 1:].reshape(-1), PAD_ID)


def generate_greedy(backbone, prefix, source, max_len, *, first_choices=None):
    """
    Argmax decoding from BOS until EOS or max_len tokens per row. The
    returned sequences include the EOS token when one was produced.
    first_choices restricts the first generated token to the given ids
    (label-constrained classification). Ties go to the lowest id.
    """
    cfg = backbone.config
    source = _check_tokens(source, cfg.max_source_len, cfg.vocab_size, "source")
    max_len = min(int(max_len), cfg.max_target_len)
    batch = source.shape[0]
    outputs = [[] for _ in range(batch)]
    with ad.no_grad():
        sites = _site_prefixes(backbone, prefix)
        memory, mask = encode(backbone, sites, source)
        sequences = np.full((batch, 1), BOS_ID, dtype=np.int64)
        finished = np.zeros(batch, dtype=bool)
        for step in range(max_len):
            logits = decode(backbone, sites, memory, mask, sequences).data[:, -1, :]
            if step == 0 and first_choices is not None:
                choices = np.asarray(sorted(first_choices), dtype=np.int64)
                chosen = choices[np.argmax(logits[:, choices], axis=1)]
            else:
                chosen = np.argmax(logits, axis=1)
            for row in range(batch):
                if not finished[row]:
                    outputs[row].append(int(chosen[row]))
                    finished[row] = chosen[row] == EOS_ID
            if finished.all():
                break
            sequences = np.concatenate([sequences, chosen[:, None]], axis=1)
    return outputs

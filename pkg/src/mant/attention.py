"""Toy single-layer attention pipeline over the quantized KV cache.

Exercises the full policy stack end to end: prefill quantizes K and V
wholesale, each decode step runs the spatial K path and the two-phase V
window, queries and softmax probabilities are quantized to group-wise INT8
along their accumulation axes, and softmax stays in real arithmetic.  A
full-precision reference trace runs alongside for error reporting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .codec import (
    DEFAULT_GROUP_SIZE,
    INT4_COEFF,
    MAGNITUDE_MASK,
    SIGN_BIT,
    quantize_activation_group,
)
from .kvcache import KvCache
from .selection import CandidateSet, VarianceTable, build_variance_table


@dataclass(frozen=True)
class AttentionPolicies:
    """Quantization switches for the toy pipeline."""

    group_size: int = DEFAULT_GROUP_SIZE
    quantize_kv: bool = True
    quantize_activations: bool = True
    k_table: VarianceTable | None = None
    v_table: VarianceTable | None = None


@dataclass
class ToyAttentionReport:
    """Quantized outputs, the FP reference trace, and per-step errors."""

    prefill_outputs: np.ndarray       # (prefill_len, heads, head_dim)
    reference_prefill: np.ndarray
    step_outputs: np.ndarray          # (decode_steps, heads, head_dim)
    reference_steps: np.ndarray
    step_cosine: np.ndarray
    step_mse: np.ndarray
    prefill_cosine: float
    flush_steps: list[int] = field(default_factory=list)
    clamp_count: int = 0


DEFAULT_TOKEN_CORRELATION = 0.9


def synthesize_stream(rng: np.random.Generator, length: int, heads: int, head_dim: int,
                      correlation: float = DEFAULT_TOKEN_CORRELATION):
    """Transformer-like toy q/k/v streams, shape (length, heads, head_dim) each.

    Hidden states follow a stationary AR(1) walk (token correlation
    ``correlation``) and are projected through fixed random matrices, so
    keys and values carry the kind of temporal structure real caches have;
    entries are marginally standard normal.
    """
    if not 0.0 <= correlation < 1.0:
        raise ValueError(f"correlation must be in [0, 1), got {correlation}")
    model_dim = heads * head_dim
    w_q = rng.standard_normal((model_dim, heads, head_dim)) / math.sqrt(model_dim)
    w_k = rng.standard_normal((model_dim, heads, head_dim)) / math.sqrt(model_dim)
    w_v = rng.standard_normal((model_dim, heads, head_dim)) / math.sqrt(model_dim)
    hidden = rng.standard_normal((length, model_dim))
    innovation = math.sqrt(1.0 - correlation * correlation)
    for t in range(1, length):
        hidden[t] = correlation * hidden[t - 1] + innovation * hidden[t]
    q = np.einsum("tm,mhd->thd", hidden, w_q)
    k = np.einsum("tm,mhd->thd", hidden, w_k)
    v = np.einsum("tm,mhd->thd", hidden, w_v)
    return q, k, v


def calibration_tables(rng: np.random.Generator, heads: int, head_dim: int,
                       group_size: int, correlation: float = DEFAULT_TOKEN_CORRELATION,
                       length: int = 256,
                       candidates: CandidateSet | None = None):
    """Variance tables for the K and V roles, calibrated on a toy stream.

    Key groups run along the head dimension (one slice per token), value
    groups along the sequence (one slice per channel), so the two roles see
    different statistics and get separate tables.
    """
    candidates = candidates or CandidateSet(include_int=False)
    _, k, v = synthesize_stream(rng, length, heads, head_dim, correlation)
    k_groups = []
    for t in range(length):
        for h in range(heads):
            for start in range(0, head_dim, group_size):
                k_groups.append(k[t, h, start:start + group_size])
    k_groups = [g for g in k_groups if g.size == group_size]
    v_groups = []
    for b in range(length // group_size):
        rows = v[b * group_size:(b + 1) * group_size]
        for h in range(heads):
            for c in range(head_dim):
                v_groups.append(rows[:, h, c])
    k_table = build_variance_table(np.array(k_groups), candidates)
    v_table = build_variance_table(np.array(v_groups), candidates)
    return k_table, v_table


def _cosine(x: np.ndarray, y: np.ndarray) -> float:
    nx = float(np.linalg.norm(x))
    ny = float(np.linalg.norm(y))
    if nx == 0.0 and ny == 0.0:
        return 1.0
    if nx == 0.0 or ny == 0.0:
        return 0.0
    return float(np.dot(x.ravel(), y.ravel()) / (nx * ny))


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - np.max(scores)
    exps = np.exp(shifted)
    return exps / exps.sum()


def _signed_tables(codes: np.ndarray):
    """Linear and power-of-two decode planes of an array of nibble codes."""
    mags = (codes & MAGNITUDE_MASK).astype(np.float64)
    signs = np.where(codes & SIGN_BIT, -1.0, 1.0)
    return signs * mags, signs * np.exp2(mags)


def _int8_groups(vector: np.ndarray, group_size: int):
    """Group-wise INT8 codes and scales of a 1-D vector."""
    codes = []
    scales = []
    for start in range(0, vector.size, group_size):
        stop = min(start + group_size, vector.size)
        group_codes, meta = quantize_activation_group(vector[start:stop])
        codes.append(group_codes)
        scales.append(meta.scale)
    return codes, scales


def _int8_roundtrip(vector: np.ndarray, group_size: int) -> np.ndarray:
    """Quantize a vector to group-wise INT8 and decode it back."""
    codes, scales = _int8_groups(vector, group_size)
    return np.concatenate([c.astype(np.float64) * s for c, s in zip(codes, scales)])


def _scores_fused(q_codes, q_scales, cache: KvCache, head: int, upto: int) -> np.ndarray:
    """Fused attention scores of one head against cached keys [0, upto)."""
    k_codes, k_scales, k_coeffs = cache.k_arrays()
    scores = np.zeros(upto)
    for g, (start, stop) in enumerate(cache.k_group_slices):
        length = stop - start
        lin, pot = _signed_tables(k_codes[:upto, head, g, :length])
        xg = q_codes[g][:length].astype(np.float64)
        psum1 = lin @ xg
        psum2 = pot @ xg
        coeffs = k_coeffs[:upto, head, g]
        is_mant = coeffs != INT4_COEFF
        a_eff = np.where(is_mant, coeffs.astype(np.float64), 1.0)
        scores += (psum1 * a_eff + psum2 * is_mant) * (q_scales[g] * k_scales[:upto, head, g])
    return scores


def _weighted_values_fused(p_codes, p_scales, cache: KvCache, head: int, upto: int) -> np.ndarray:
    """Fused probability-value product of one head over tokens [0, upto).

    Flushed blocks use the 4-bit path; tokens still inside the process
    window use the staged INT8 rows with their channel-wise scales.
    """
    out = np.zeros(cache.head_dim)
    group_size = cache.group_size
    for b, block in enumerate(cache.v_blocks(head)):
        start = b * group_size
        if start >= upto:
            break
        length = min(block.length, upto - start)
        lin, pot = _signed_tables(block.codes[:, :length])
        xg = p_codes[b][:length].astype(np.float64)
        psum1 = lin @ xg
        psum2 = pot @ xg
        is_mant = block.coeffs != INT4_COEFF
        a_eff = np.where(is_mant, block.coeffs.astype(np.float64), 1.0)
        out += (psum1 * a_eff + psum2 * is_mant) * (p_scales[b] * block.scales)
    flushed = cache.flushed_tokens
    if cache.windows is not None and upto > flushed:
        window = cache.windows[head]
        staged = window.staged[:upto - flushed].astype(np.float64)
        b = flushed // group_size
        xg = p_codes[b][:upto - flushed].astype(np.float64)
        out += (staged.T @ xg) * (p_scales[b] * window.channel_scales)
    return out


def _attention_row(q_row, store, policies: AttentionPolicies, upto: int,
                   heads: int, head_dim: int, scale: float) -> np.ndarray:
    """One query's attention output over the first ``upto`` cached tokens."""
    group_size = policies.group_size
    out = np.zeros((heads, head_dim))
    for h in range(heads):
        q = q_row[h]
        if policies.quantize_kv:
            cache: KvCache = store
            q_codes, q_scales = _int8_groups(q, group_size) \
                if policies.quantize_activations else _raw_groups(q, group_size)
            scores = _scores_fused(q_codes, q_scales, cache, h, upto) * scale
            probs = _softmax(scores)
            p_codes, p_scales = _int8_groups(probs, group_size) \
                if policies.quantize_activations else _raw_groups(probs, group_size)
            out[h] = _weighted_values_fused(p_codes, p_scales, cache, h, upto)
        else:
            k_raw, v_raw = store
            q_hat = _int8_roundtrip(q, group_size) if policies.quantize_activations else q
            scores = (k_raw[:upto, h, :] @ q_hat) * scale
            probs = _softmax(scores)
            p_hat = _int8_roundtrip(probs, group_size) \
                if policies.quantize_activations else probs
            out[h] = p_hat @ v_raw[:upto, h, :]
    return out


def _raw_groups(vector: np.ndarray, group_size: int):
    """Unquantized group view (codes are the raw values, unit scales)."""
    chunks = [vector[s:s + group_size] for s in range(0, vector.size, group_size)]
    return chunks, [1.0] * len(chunks)


def run_toy_attention(prefill_len: int, decode_steps: int, heads: int, head_dim: int,
                      policies: AttentionPolicies | None = None, seed: int = 0,
                      correlation: float = DEFAULT_TOKEN_CORRELATION) -> ToyAttentionReport:
    """Run the quantized toy attention pipeline against its FP reference.

    Inputs come from :func:`synthesize_stream` under ``seed``; variance
    tables default to ones calibrated on an independent stream (derived
    seed), so the data itself is policy-independent.
    """
    if prefill_len < 1 or decode_steps < 0 or heads < 1 or head_dim < 1:
        raise ValueError("invalid geometry")
    policies = policies or AttentionPolicies()
    group_size = policies.group_size

    rng = np.random.default_rng(seed)
    q_all, k_all, v_all = synthesize_stream(rng, prefill_len + decode_steps,
                                            heads, head_dim, correlation)
    q_pre, k_pre, v_pre = (x[:prefill_len] for x in (q_all, k_all, v_all))
    q_dec, k_dec, v_dec = (x[prefill_len:] for x in (q_all, k_all, v_all))
    scale = 1.0 / math.sqrt(head_dim)

    cache = None
    if policies.quantize_kv:
        if policies.k_table is not None and policies.v_table is not None:
            k_table, v_table = policies.k_table, policies.v_table
        else:
            table_rng = np.random.default_rng([seed, 1])
            k_default, v_default = calibration_tables(table_rng, heads, head_dim,
                                                      group_size, correlation)
            k_table = policies.k_table or k_default
            v_table = policies.v_table or v_default
        cache = KvCache(heads, head_dim, k_table, v_table, group_size)
        cache.prefill(k_pre, v_pre)
        store = cache
    else:
        store = (k_pre, v_pre)

    ref_policies = AttentionPolicies(group_size=group_size, quantize_kv=False,
                                     quantize_activations=False)
    ref_k = k_pre
    ref_v = v_pre

    prefill_out = np.zeros((prefill_len, heads, head_dim))
    ref_prefill = np.zeros((prefill_len, heads, head_dim))
    for i in range(prefill_len):
        prefill_out[i] = _attention_row(q_pre[i], store, policies, i + 1,
                                        heads, head_dim, scale)
        ref_prefill[i] = _attention_row(q_pre[i], (ref_k, ref_v), ref_policies, i + 1,
                                        heads, head_dim, scale)

    step_out = np.zeros((decode_steps, heads, head_dim))
    ref_steps = np.zeros((decode_steps, heads, head_dim))
    cosines = np.zeros(decode_steps)
    mses = np.zeros(decode_steps)
    flush_steps: list[int] = []
    for s in range(decode_steps):
        if policies.quantize_kv:
            cache.append_k(k_dec[s])
            if cache.push_v(v_dec[s]):
                flush_steps.append(s)
        else:
            k_raw, v_raw = store
            store = (np.concatenate([k_raw, k_dec[s][None]]),
                     np.concatenate([v_raw, v_dec[s][None]]))
        ref_k = np.concatenate([ref_k, k_dec[s][None]])
        ref_v = np.concatenate([ref_v, v_dec[s][None]])

        seq = prefill_len + s + 1
        step_out[s] = _attention_row(q_dec[s], store, policies, seq,
                                     heads, head_dim, scale)
        ref_steps[s] = _attention_row(q_dec[s], (ref_k, ref_v), ref_policies, seq,
                                      heads, head_dim, scale)
        cosines[s] = _cosine(step_out[s], ref_steps[s])
        mses[s] = float(np.mean((step_out[s] - ref_steps[s]) ** 2))

    prefill_cos = float(np.mean([_cosine(prefill_out[i], ref_prefill[i])
                                 for i in range(prefill_len)]))
    clamp = 0
    if cache is not None and cache.windows is not None:
        clamp = sum(w.clamp_count for w in cache.windows)
    return ToyAttentionReport(prefill_out, ref_prefill, step_out, ref_steps,
                              cosines, mses, prefill_cos, flush_steps, clamp)

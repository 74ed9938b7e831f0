"""Streaming transformer policy: KV-cached incremental inference over a
sliding window with condensed long-term memory, autoregressive 4-action
decoding, and the training-only latent prediction branch.

Streaming contract (also realized densely by ``forward_full``):

* The instruction prefix attends causally within itself; its K/V are computed
  once per episode.
* Memory tokens are condensed keyframes selected from the whole-episode pool.
  Their content changes at every turn boundary, so their K/V are recomputed
  at the start of each turn; they attend the instruction plus earlier memory
  slots.
* A turn's Ctxt/Act tokens attend the instruction, the memory snapshot of
  their own turn, the cached window turns, and themselves causally. Their K/V
  enter the cache once, computed at their own turn, and are reused verbatim
  afterwards (the memory snapshot they saw is frozen into them).
* Query tokens read everything navigational up to their turn plus their own
  segment (causally), produce e2d/e3d, and their K/V are discarded.

Token positions are absolute: instruction 0..L-1, then a reserved block of
``keyframes`` memory slots (every snapshot reuses these slot positions), then
(ctxt+act) per absolute turn index. Query tokens continue integer positions
after their turn's act segment. Eviction therefore never shifts positions.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import encoders as enc
from .gridworld import VOCAB

N_ACTIONS = 4
BOS_ACTION = 4  # row of embed.act_in used for the first act slot

TYPE_KINDS = ("instruction", "memory", "ctxt", "act", "query2d", "query3d")

# kind codes for flat token tables (training pass and dense oracle)
_K_INS, _K_MEM, _K_CTXT, _K_ACT, _K_Q2D, _K_Q3D = range(6)


class PolicyError(RuntimeError):
    """Cache/layout desync or misuse of the streaming interface."""


@dataclass(frozen=True)
class PolicyConfig:
    layers: int = 4
    heads: int = 4
    d_model: int = 64
    window: int = 8                    # N: current turn + N-1 cached turns
    keyframes: int = 8                 # long-term memory budget
    n_a: int = 4                       # fixed by the action-chunk contract
    queries_per_modality: int = 3
    masked_tokens_per_modality: int = 16
    decoder_layers: int = 2            # fixed
    predictive: bool = True
    pool_query_embedding: bool = False  # mean-pool e2d/e3d before decoding
    isolated_queries: bool = False      # query tokens see only themselves
    trainable_2d: bool = False          # policy-side trainable 2D copy
    vocab: int = len(VOCAB)
    dims: enc.EncoderDims = enc.DEFAULT_DIMS

    def __post_init__(self):
        if self.n_a != 4:
            raise ValueError("n_a is fixed at 4")
        if self.decoder_layers != 2:
            raise ValueError("decoder_layers is fixed at 2")
        if self.d_model % self.heads:
            raise ValueError("d_model must divide by heads")
        if self.masked_tokens_per_modality < 1 or self.queries_per_modality < 1:
            raise ValueError("token counts must be >= 1")

    @property
    def len_ctxt(self) -> int:
        return self.dims.tokens


def sinusoidal_pe(positions, d: int) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    ang = pos / (10000.0 ** (2.0 * i / d))
    pe = np.zeros((pos.shape[0], d))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang)
    return pe


def sample_actions(logits) -> list:
    """Greedy per-position argmax; ties go to the lowest action index."""
    logits = np.asarray(logits)
    if logits.shape != (N_ACTIONS, N_ACTIONS):
        raise ValueError("expected 4x4 action logits")
    return [int(np.argmax(row)) for row in logits]


def memory_indices(pool_size: int, budget: int) -> list:
    """Uniform keyframe selection: 1-based indices ceil(k*P/budget), k=1..budget,
    deduplicated, returned 0-based. The whole pool when P <= budget."""
    if pool_size <= budget:
        return list(range(pool_size))
    out = []
    for k in range(1, budget + 1):
        idx = math.ceil(k * pool_size / budget) - 1
        if not out or idx != out[-1]:
            out.append(idx)
    return out


@dataclass
class StreamState:
    """Single-owner per-episode state; mutated by step/maintain_window."""
    instruction: np.ndarray
    turn: int
    cut3r: enc.Cut3rState
    pool: list                  # all condensed keyframes, one (1, d) per turn
    memory: np.ndarray          # current M token inputs, (m, d)
    inst_kv: list               # per layer (k, v)
    mem_kv: list | None         # per layer (k, v); None when memory is empty
    turns_kv: list              # per past turn: list per layer of (k, v)

    def cached_turns(self) -> int:
        return len(self.turns_kv)

    def cache_tokens(self) -> int:
        n = self.inst_kv[0][0].shape[0]
        if self.mem_kv is not None:
            n += self.mem_kv[0][0].shape[0]
        n += sum(t[0][0].shape[0] for t in self.turns_kv)
        return n


class StreamPolicy:
    """Owns the parameter store and the frozen teachers."""

    def __init__(self, config: PolicyConfig = PolicyConfig(), seed: int = 0,
                 teacher_seed: int = 0):
        self.config = config
        self.teachers = enc.make_teachers(teacher_seed, config.dims)
        self.params = self._init_params(np.random.default_rng(seed))

    # ------------------------------------------------------------- params

    def _init_params(self, rng):
        c = self.config
        d, dims = c.d_model, c.dims
        p = {}

        def mat(name, shape, std=None):
            p[name] = rng.normal(scale=(std or 1.0 / np.sqrt(shape[0])), size=shape)

        def block(prefix, width):
            p[f"{prefix}.ln1.g"] = np.ones(width)
            p[f"{prefix}.ln1.b"] = np.zeros(width)
            for w in ("wq", "wk", "wv", "wo"):
                mat(f"{prefix}.attn.{w}", (width, width))
            p[f"{prefix}.ln2.g"] = np.ones(width)
            p[f"{prefix}.ln2.b"] = np.zeros(width)
            mat(f"{prefix}.mlp.w1", (width, 4 * width))
            p[f"{prefix}.mlp.b1"] = np.zeros(4 * width)
            mat(f"{prefix}.mlp.w2", (4 * width, width))
            p[f"{prefix}.mlp.b2"] = np.zeros(width)

        mat("embed.tok", (c.vocab, d), std=0.5)
        mat("embed.type", (len(TYPE_KINDS), d), std=0.1)
        mat("embed.act_in", (N_ACTIONS + 1, d), std=0.5)
        for i in range(c.layers):
            block(f"backbone.l{i}", d)
        p["backbone.final_ln.g"] = np.ones(d)
        p["backbone.final_ln.b"] = np.zeros(d)
        mat("head.w", (d, N_ACTIONS))
        p["head.b"] = np.zeros(N_ACTIONS)
        mat("fusion.wq", (dims.d2, dims.d2))
        mat("fusion.wk", (dims.d3, dims.d2))
        mat("fusion.wv", (dims.d3, dims.d2))
        mat("proj.w1", (dims.d2, d))
        p["proj.b1"] = np.zeros(d)
        mat("proj.w2", (d, d))
        p["proj.b2"] = np.zeros(d)
        mat("condense.w", (dims.d2, d))
        p["condense.b"] = np.zeros(d)
        if c.trainable_2d:
            p["enc2d.w"] = self.teachers.proj2d_w.copy()
            p["enc2d.b"] = self.teachers.proj2d_b.copy()
        if c.predictive:
            mat("query.q2d", (c.queries_per_modality, d), std=0.5)
            mat("query.q3d", (c.queries_per_modality, d), std=0.5)
            mat("query.m2d", (1, d), std=0.5)
            mat("query.m3d", (1, d), std=0.5)
            for name, out_dim in (("dec2d", dims.d2), ("dec3d", dims.d3)):
                for i in range(c.decoder_layers):
                    block(f"{name}.l{i}", d)
                p[f"{name}.final_ln.g"] = np.ones(d)
                p[f"{name}.final_ln.b"] = np.zeros(d)
                mat(f"{name}.head.w", (d, out_dim))
                p[f"{name}.head.b"] = np.zeros(out_dim)
        return p

    def param_group(self, name: str) -> list:
        """Parameter names with a given dotted prefix."""
        prefix = name + "."
        return [k for k in self.params if k.startswith(prefix)]

    def leaves(self, tape):
        return {k: tape.leaf(v) for k, v in self.params.items()}

    # ------------------------------------------------------ shared pieces

    def _attn_block(self, p, prefix, x, mask, kv_prefix=None, want_kv=False):
        """Pre-LN attention + MLP residual block.

        kv_prefix: optional (K, V) arrays prepended to this block's own
        projected keys/values (the KV cache). mask covers prefix + self keys.
        """
        heads = self.config.heads
        h = ad.layernorm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
        q = ad.matmul(h, p[f"{prefix}.attn.wq"])
        k = ad.matmul(h, p[f"{prefix}.attn.wk"])
        v = ad.matmul(h, p[f"{prefix}.attn.wv"])
        if kv_prefix is not None:
            kc = ad.concat_rows(kv_prefix[0], k)
            vc = ad.concat_rows(kv_prefix[1], v)
        else:
            kc, vc = k, v
        a = ad.attention(q, kc, vc, mask, heads)
        x = ad.add(x, ad.matmul(a, p[f"{prefix}.attn.wo"]))
        h2 = ad.layernorm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
        m = ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(h2, p[f"{prefix}.mlp.w1"]),
                                            p[f"{prefix}.mlp.b1"])),
                             p[f"{prefix}.mlp.w2"]), p[f"{prefix}.mlp.b2"])
        x = ad.add(x, m)
        if want_kv:
            return x, (np.asarray(k.data), np.asarray(v.data))
        return x

    def _cross_block(self, p, prefix, x, cond, mask):
        """Decoder block: x cross-attends cond, then MLP; both residual."""
        heads = self.config.heads
        h = ad.layernorm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
        q = ad.matmul(h, p[f"{prefix}.attn.wq"])
        k = ad.matmul(cond, p[f"{prefix}.attn.wk"])
        v = ad.matmul(cond, p[f"{prefix}.attn.wv"])
        a = ad.attention(q, k, v, mask, heads)
        x = ad.add(x, ad.matmul(a, p[f"{prefix}.attn.wo"]))
        h2 = ad.layernorm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
        m = ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(h2, p[f"{prefix}.mlp.w1"]),
                                            p[f"{prefix}.mlp.b1"])),
                             p[f"{prefix}.mlp.w2"]), p[f"{prefix}.mlp.b2"])
        return ad.add(x, m)

    def _final(self, p, x):
        return ad.layernorm(x, p["backbone.final_ln.g"], p["backbone.final_ln.b"])

    def _embed_instruction(self, p, ids):
        x = ad.gather_rows(p["embed.tok"], ids)
        return self._stamp(p, x, "instruction", np.arange(len(ids)))

    def _stamp(self, p, x, kind, positions):
        """Add the type embedding and positional encoding for a segment."""
        ty = ad.gather_rows(p["embed.type"], np.full(x.shape[0], TYPE_KINDS.index(kind)))
        pe = sinusoidal_pe(positions, self.config.d_model)
        return ad.add(ad.add(x, ty), pe)

    def _turn_base(self, instr_len: int, turn: int) -> int:
        c = self.config
        return instr_len + c.keyframes + turn * (c.len_ctxt + c.n_a)

    def _encode_obs_2d(self, p, obs):
        if self.config.trainable_2d:
            return enc.encode_2d_trainable(obs, self.config.dims,
                                           p["enc2d.w"], p["enc2d.b"])
        return enc.encode_2d(obs, self.teachers)

    def _ctxt_inputs(self, p, obs, cut3r):
        """(ctxt token embeddings, keyframe token, advanced Cut3rState)."""
        f2d = self._encode_obs_2d(p, obs)
        f3d, cut3r = enc.encode_3d_step(obs, cut3r, self.teachers)
        fused = enc.fuse(f2d, f3d, p["fusion.wq"], p["fusion.wk"], p["fusion.wv"])
        feats = enc.project(fused, [(p["proj.w1"], p["proj.b1"]),
                                    (p["proj.w2"], p["proj.b2"])])
        key = enc.condense_keyframe(fused, p["condense.w"], p["condense.b"])
        return feats, key, cut3r

    def _query_self_mask(self, variant: str) -> np.ndarray:
        """Intra-block mask for the stacked [q2d; q3d] rows of one turn."""
        nq = self.config.queries_per_modality
        n = 2 * nq
        if self.config.isolated_queries:
            block = np.eye(n, dtype=bool)
            if variant == "noiso":
                cross = np.zeros((n, n), dtype=bool)
                cross[nq:, :nq] = True  # q3d rows come later, may see q2d
                block |= cross | np.eye(n, dtype=bool)
            return block
        if variant == "noiso" or variant == "leaky":
            return np.tril(np.ones((n, n), dtype=bool))
        block = np.zeros((n, n), dtype=bool)
        block[:nq, :nq] = np.tril(np.ones((nq, nq), dtype=bool))
        block[nq:, nq:] = np.tril(np.ones((nq, nq), dtype=bool))
        return block

    # --------------------------------------------------------- streaming

    def begin_episode(self, instruction) -> StreamState:
        instruction = np.asarray(instruction, dtype=np.int64)
        if instruction.size == 0:
            raise PolicyError("empty instruction")
        if instruction.min() < 0 or instruction.max() >= self.config.vocab:
            raise PolicyError("instruction token out of vocabulary")
        p = self.params
        x = self._embed_instruction(p, instruction)
        n = len(instruction)
        mask = np.tril(np.ones((n, n), dtype=bool))
        inst_kv = []
        for i in range(self.config.layers):
            x, kv = self._attn_block(p, f"backbone.l{i}", x, mask, want_kv=True)
            inst_kv.append(kv)
        return StreamState(
            instruction=instruction, turn=0, cut3r=enc.reset_3d(self.config.dims),
            pool=[], memory=np.zeros((0, self.config.d_model)),
            inst_kv=inst_kv, mem_kv=None, turns_kv=[])

    def _refresh_memory_kv(self, state: StreamState):
        """Run the current memory tokens through the backbone (keys: the
        instruction plus earlier memory slots) and cache their K/V."""
        if state.memory.shape[0] == 0:
            state.mem_kv = None
            return
        p = self.params
        m = state.memory.shape[0]
        inst_len = len(state.instruction)
        positions = inst_len + np.arange(m)
        x = self._stamp(p, np.asarray(state.memory), "memory", positions)
        mask = np.hstack([np.ones((m, inst_len), dtype=bool),
                          np.tril(np.ones((m, m), dtype=bool))])
        mem_kv = []
        for i in range(self.config.layers):
            x, kv = self._attn_block(p, f"backbone.l{i}", x, mask,
                                     kv_prefix=state.inst_kv[i], want_kv=True)
            mem_kv.append(kv)
        state.mem_kv = mem_kv

    def _nav_keys(self, state: StreamState, extra=None):
        """Per-layer (K, V) of everything a navigation row may attend:
        instruction, current memory snapshot, window turns, plus any
        already-computed rows of the current turn."""
        out = []
        for i in range(self.config.layers):
            ks = [state.inst_kv[i][0]]
            vs = [state.inst_kv[i][1]]
            if state.mem_kv is not None:
                ks.append(state.mem_kv[i][0])
                vs.append(state.mem_kv[i][1])
            for turn_kv in state.turns_kv:
                ks.append(turn_kv[i][0])
                vs.append(turn_kv[i][1])
            if extra is not None:
                ks.append(extra[i][0])
                vs.append(extra[i][1])
            out.append((np.concatenate(ks), np.concatenate(vs)))
        return out

    def _rows_through_backbone(self, rows, keys, self_mask):
        """Forward new rows against fixed per-layer keys; returns final
        hidden states and the rows' per-layer (k, v)."""
        p = self.params
        n = rows.shape[0] if hasattr(rows, "shape") else len(rows)
        x = rows
        new_kv = []
        for i in range(self.config.layers):
            n_prefix = keys[i][0].shape[0]
            mask = np.hstack([np.ones((n, n_prefix), dtype=bool), self_mask])
            x, kv = self._attn_block(p, f"backbone.l{i}", x, mask,
                                     kv_prefix=keys[i], want_kv=True)
            new_kv.append(kv)
        return self._final(p, x), new_kv

    def step(self, state: StreamState, obs, with_prediction: bool = False,
             variant: str = "strict"):
        """One streaming turn. Returns (act logits 4x4, (e2d, e3d) or None,
        state). Mutates and returns the same state object.

        The mask variant only shapes query-row attention here: past query
        K/V are never cached, so navigation rows cannot see queries in any
        variant during streaming (training-time Leaky differs).
        """
        if with_prediction and not self.config.predictive:
            raise PolicyError("prediction branch is disabled in this config")
        p = self.params
        c = self.config
        self._refresh_memory_kv(state)
        feats, keyframe, cut3r = self._ctxt_inputs(p, obs, state.cut3r)
        state.cut3r = cut3r
        base = self._turn_base(len(state.instruction), state.turn)

        ctxt = self._stamp(p, feats, "ctxt", base + np.arange(c.len_ctxt))
        keys = self._nav_keys(state)
        _, turn_kv = self._rows_through_backbone(
            ctxt, keys, np.tril(np.ones((c.len_ctxt, c.len_ctxt), dtype=bool)))

        logits = np.zeros((N_ACTIONS, N_ACTIONS))
        actions = []
        act_pos = base + c.len_ctxt
        for j in range(N_ACTIONS):
            prev = BOS_ACTION if j == 0 else actions[-1]
            row = ad.gather_rows(p["embed.act_in"], np.array([prev]))
            row = self._stamp(p, row, "act", [act_pos + j])
            keys = self._nav_keys(state, extra=turn_kv)
            hidden, row_kv = self._rows_through_backbone(
                row, keys, np.ones((1, 1), dtype=bool))
            out = ad.add(ad.matmul(hidden, p["head.w"]), p["head.b"])
            logits[j] = np.asarray(out.data)[0]
            actions.append(int(np.argmax(logits[j])))
            for i in range(c.layers):
                turn_kv[i] = (np.concatenate([turn_kv[i][0], row_kv[i][0]]),
                              np.concatenate([turn_kv[i][1], row_kv[i][1]]))

        latents = None
        if with_prediction:
            nq = c.queries_per_modality
            qpos = act_pos + N_ACTIONS
            q2d = self._stamp(p, np.asarray(p["query.q2d"]), "query2d",
                              qpos + np.arange(nq))
            q3d = self._stamp(p, np.asarray(p["query.q3d"]), "query3d",
                              qpos + nq + np.arange(nq))
            qrows = ad.concat_rows(q2d, q3d)
            keys = self._nav_keys(state, extra=turn_kv)
            hidden, _ = self._rows_through_backbone(
                qrows, keys, self._query_self_mask(variant))
            h = np.asarray(hidden.data)
            latents = (h[:nq], h[nq:])

        state.turns_kv.append(turn_kv)
        state.pool.append(np.asarray(keyframe.data))
        state.turn += 1
        self.maintain_window(state)
        return logits, latents, state

    def maintain_window(self, state: StreamState) -> StreamState:
        """Evict turns beyond the window and rebuild the memory tokens from
        the whole keyframe pool."""
        c = self.config
        while len(state.turns_kv) > c.window - 1:
            state.turns_kv.pop(0)
        idx = memory_indices(len(state.pool), c.keyframes)
        if idx:
            state.memory = np.concatenate([state.pool[i] for i in idx])
        else:
            state.memory = np.zeros((0, c.d_model))
        return state

    # ------------------------------------------------------ latent branch

    def _decode_latents(self, p, conds2d, conds3d):
        """Run both 2-layer decoders over per-turn conditioning sequences.

        conds2d/conds3d: list of (nq, d) blocks (Tensors or arrays), one per
        turn. All turns decode in one pass via a block-diagonal mask.
        Returns (F2D (turns*masked, d2) l2-normalized, F3D (..., d3)).
        """
        c = self.config
        if not c.predictive:
            raise PolicyError("prediction branch is disabled in this config")
        n_turns = len(conds2d)
        mt = c.masked_tokens_per_modality
        nq = conds2d[0].shape[0]
        pe = np.tile(sinusoidal_pe(np.arange(mt), c.d_model), (n_turns, 1))
        cross = np.kron(np.eye(n_turns, dtype=bool),
                        np.ones((mt, nq), dtype=bool))
        outs = []
        for name, conds in (("dec2d", conds2d), ("dec3d", conds3d)):
            mrow = p[f"query.m{name[-2:]}"]
            x = ad.add(ad.gather_rows(mrow, np.zeros(n_turns * mt, dtype=np.int64)), pe)
            cond = ad.concat_rows(*conds) if n_turns > 1 else conds[0]
            for i in range(c.decoder_layers):
                x = self._cross_block(p, f"{name}.l{i}", x, cond, cross)
            x = ad.layernorm(x, p[f"{name}.final_ln.g"], p[f"{name}.final_ln.b"])
            x = ad.add(ad.matmul(x, p[f"{name}.head.w"]), p[f"{name}.head.b"])
            outs.append(x)
        return ad.l2_normalize(outs[0]), outs[1]

    def _pool_cond(self, block):
        return ad.mean_rows(block) if self.config.pool_query_embedding else block

    def decode_latents(self, e2d, e3d):
        """Latent predictions for one turn's query embeddings."""
        f2d, f3d = self._decode_latents(self.params,
                                        [self._pool_cond(np.asarray(e2d))],
                                        [self._pool_cond(np.asarray(e3d))])
        return np.asarray(f2d.data), np.asarray(f3d.data)

    # --------------------------------------------------------------- agent

    def agent(self, with_prediction: bool = False):
        return PolicyAgent(self, with_prediction)

    # --------------------------------------------------- dense training pass

    def table_mask(self, kinds, turns, variant: str) -> np.ndarray:
        """Visibility matrix over a flat token table that carries per-turn
        memory snapshots (kind/turn code per row, table order = processing
        order).

        strict applies the streaming rules exactly: navigation rows of turn t
        see the instruction, the turn-t snapshot, and windowed navigation;
        query rows add their own segment (or just themselves when
        isolated_queries). noiso additionally lets same-turn query segments
        see each other. leaky is plain causal over the whole table, which is
        the training-time leak: navigation sees earlier queries and stale
        snapshots, none of which exist in the cache at streaming time.
        """
        c = self.config
        kk = np.asarray(kinds)
        tt = np.asarray(turns)
        n = kk.size
        pos = np.arange(n)
        causal = pos[None, :] <= pos[:, None]
        if variant == "leaky":
            return causal
        if variant != "strict" and variant != "noiso":
            raise ValueError(f"unknown mask variant {variant!r}")

        ins = kk == _K_INS
        mem = kk == _K_MEM
        navk = (kk == _K_CTXT) | (kk == _K_ACT)
        same = tt[None, :] == tt[:, None]
        win = same | ((tt[None, :] >= tt[:, None] - (c.window - 1))
                      & (tt[None, :] < tt[:, None]))
        nav_vis = (ins[None, :] | (mem[None, :] & same) | (navk[None, :] & win)) & causal

        mask = np.zeros((n, n), dtype=bool)
        mask[ins] = (ins[None, :] & causal)[ins]
        mask[mem] = ((ins[None, :] | (mem[None, :] & same)) & causal)[mem]
        mask[navk] = nav_vis[navk]
        for code, other in ((_K_Q2D, _K_Q3D), (_K_Q3D, _K_Q2D)):
            rows = kk == code
            if not rows.any():
                continue
            own = (kk[None, :] == code) & same & causal
            if c.isolated_queries:
                own = pos[None, :] == pos[:, None]
            qvis = nav_vis | own
            if variant == "noiso":
                qvis = qvis | ((kk[None, :] == other) & same & causal)
            mask[rows] = qvis[rows]
        return mask

    def forward_teacher_forced(self, p, instruction, observations, actions,
                               variant: str = "strict", with_queries: bool = True):
        """Teacher-forced full-sequence forward used for training and the
        mask-variant ablations.

        The token table reproduces what streaming would build: each turn gets
        its own memory snapshot (condensed keyframes of earlier turns, on the
        tape so the condenser trains) and navigation attention is clipped to
        the window, so episodes longer than the window exercise eviction the
        same way eval does.

        actions: per turn, the 4 expert action ids; act inputs are shifted
        right with BOS. Returns (per-turn logits, e2d blocks, e3d blocks);
        the latter are None when with_queries is false.
        """
        c = self.config
        if with_queries and not c.predictive:
            raise PolicyError("prediction branch is disabled in this config")
        instruction = np.asarray(instruction, dtype=np.int64)
        n_turns = len(observations)
        nq = c.queries_per_modality
        inst_len = len(instruction)

        parts, kinds, turns = [], [], []
        slices = {}
        ofs = 0

        def push(code, turn, seg, n_rows):
            nonlocal ofs
            parts.append(seg)
            kinds.extend([code] * n_rows)
            turns.extend([turn] * n_rows)
            slices[(code, turn)] = (ofs, ofs + n_rows)
            ofs += n_rows

        push(_K_INS, -1, self._embed_instruction(p, instruction), inst_len)
        cut3r = enc.reset_3d(c.dims)
        pool = []
        for t, obs in enumerate(observations):
            idx = memory_indices(len(pool), c.keyframes)
            if idx:
                mem = pool[idx[0]] if len(idx) == 1 else \
                    ad.concat_rows(*[pool[i] for i in idx])
                push(_K_MEM, t,
                     self._stamp(p, mem, "memory", inst_len + np.arange(len(idx))),
                     len(idx))
            feats, keyframe, cut3r = self._ctxt_inputs(p, obs, cut3r)
            base = self._turn_base(inst_len, t)
            push(_K_CTXT, t,
                 self._stamp(p, feats, "ctxt", base + np.arange(c.len_ctxt)),
                 c.len_ctxt)
            ids = np.array([BOS_ACTION] + list(actions[t][:N_ACTIONS - 1]))
            row = ad.gather_rows(p["embed.act_in"], ids)
            push(_K_ACT, t,
                 self._stamp(p, row, "act", base + c.len_ctxt + np.arange(N_ACTIONS)),
                 N_ACTIONS)
            if with_queries:
                qpos = base + c.len_ctxt + N_ACTIONS
                push(_K_Q2D, t,
                     self._stamp(p, p["query.q2d"], "query2d", qpos + np.arange(nq)),
                     nq)
                push(_K_Q3D, t,
                     self._stamp(p, p["query.q3d"], "query3d",
                                 qpos + nq + np.arange(nq)),
                     nq)
            pool.append(keyframe)

        mask = self.table_mask(kinds, turns, variant)
        x = ad.concat_rows(*parts)
        for i in range(c.layers):
            x = self._attn_block(p, f"backbone.l{i}", x, mask)
        h = self._final(p, x)

        logits, e2d, e3d = [], [], []
        for t in range(n_turns):
            s0, s1 = slices[(_K_ACT, t)]
            rows = ad.slice_rows(h, s0, s1)
            logits.append(ad.add(ad.matmul(rows, p["head.w"]), p["head.b"]))
            if with_queries:
                s0, s1 = slices[(_K_Q2D, t)]
                e2d.append(ad.slice_rows(h, s0, s1))
                s0, s1 = slices[(_K_Q3D, t)]
                e3d.append(ad.slice_rows(h, s0, s1))
        if not with_queries:
            return logits, None, None
        return logits, e2d, e3d

    # ------------------------------------------------------- dense oracle

    def forward_full(self, instruction, observations, with_prediction: bool = False,
                     variant: str = "strict"):
        """No-cache reference: rebuilds the whole token sequence after every
        extension and runs dense attention under the streaming visibility
        rules (each turn sees its own memory snapshot and its own window).

        Returns (per-turn logits list, per-turn (e2d, e3d) list or None,
        chosen actions per turn).
        """
        p = self.params
        c = self.config
        instruction = np.asarray(instruction, dtype=np.int64)
        if instruction.size == 0:
            raise PolicyError("empty instruction")
        inst_len = len(instruction)

        K_INS, K_MEM, K_CTXT, K_ACT, K_Q2D, K_Q3D = range(6)
        embs, kinds, turns, vis_rows = [], [], [], []

        def push(code, turn, emb):
            """Append a segment; extend the visibility matrix row-wise.
            Table order is processing order, so keys never follow their
            queries and rows only ever grow."""
            data = np.asarray(emb.data if hasattr(emb, "data") else emb)
            for r in range(data.shape[0]):
                kk = np.asarray(kinds)
                tt = np.asarray(turns)
                row = _vis(code, turn, len(kinds), kk, tt)
                vis_rows.append(row)
                embs.append(data[r])
                kinds.append(code)
                turns.append(turn)

        def _vis(code, turn, self_idx, kk, tt):
            """Visibility of one new row over keys 0..self_idx (inclusive)."""
            n = self_idx + 1
            kk = np.concatenate([kk, [code]])
            tt = np.concatenate([tt, [turn]])
            if code == K_INS:
                return kk == K_INS
            if code == K_MEM:
                return (kk == K_INS) | ((kk == K_MEM) & (tt == turn))
            lo = turn - (c.window - 1)
            nav_ok = (kk == K_INS) | ((kk == K_MEM) & (tt == turn)) | \
                (((kk == K_CTXT) | (kk == K_ACT)) & (tt >= lo) & (tt <= turn))
            if code in (K_CTXT, K_ACT):
                return nav_ok
            own = (kk == code) & (tt == turn)
            if c.isolated_queries:
                own = np.arange(n) == self_idx
            out = nav_ok | own
            if variant in ("noiso", "leaky"):
                other = K_Q3D if code == K_Q2D else K_Q2D
                out |= (kk == other) & (tt == turn)
            return out

        def dense_pass():
            n = len(embs)
            mask = np.zeros((n, n), dtype=bool)
            for i, row in enumerate(vis_rows):
                mask[i, : i + 1] = row
            t = np.stack(embs)
            for i in range(c.layers):
                t = self._attn_block(p, f"backbone.l{i}", t, mask)
            return np.asarray(self._final(p, t).data)

        push(K_INS, -1, self._embed_instruction(p, instruction))

        cut3r = enc.reset_3d(c.dims)
        pool = []
        all_logits, all_latents, all_actions = [], [], []
        for t, obs in enumerate(observations):
            idx = memory_indices(len(pool), c.keyframes)
            if idx:
                mem = np.concatenate([pool[i] for i in idx])
                push(K_MEM, t, self._stamp(p, mem, "memory",
                                           inst_len + np.arange(len(idx))))
            feats, keyframe, cut3r = self._ctxt_inputs(p, obs, cut3r)
            base = self._turn_base(inst_len, t)
            push(K_CTXT, t, self._stamp(p, feats, "ctxt",
                                        base + np.arange(c.len_ctxt)))

            logits = np.zeros((N_ACTIONS, N_ACTIONS))
            actions = []
            act_pos = base + c.len_ctxt
            for j in range(N_ACTIONS):
                prev = BOS_ACTION if j == 0 else actions[-1]
                raw = ad.gather_rows(p["embed.act_in"], np.array([prev]))
                push(K_ACT, t, self._stamp(p, raw, "act", [act_pos + j]))
                hidden = dense_pass()
                out = hidden[-1] @ p["head.w"] + p["head.b"]
                logits[j] = out
                actions.append(int(np.argmax(out)))
            all_logits.append(logits)
            all_actions.append(actions)

            if with_prediction:
                nq = c.queries_per_modality
                qpos = act_pos + N_ACTIONS
                push(K_Q2D, t, self._stamp(p, np.asarray(p["query.q2d"]),
                                           "query2d", qpos + np.arange(nq)))
                push(K_Q3D, t, self._stamp(p, np.asarray(p["query.q3d"]),
                                           "query3d", qpos + nq + np.arange(nq)))
                hidden = dense_pass()
                all_latents.append((hidden[-2 * nq:-nq], hidden[-nq:]))

            pool.append(np.asarray(keyframe.data))
        return all_logits, (all_latents if with_prediction else None), all_actions


class PolicyAgent:
    """Episode-runner adapter: streams turns, returns greedy action chunks."""

    def __init__(self, policy: StreamPolicy, with_prediction: bool = False):
        self.policy = policy
        self.with_prediction = with_prediction
        self._state = None

    def begin_episode(self, instruction):
        self._state = self.policy.begin_episode(instruction)

    def step(self, obs):
        if self._state is None:
            raise PolicyError("begin_episode was never called")
        logits, _, self._state = self.policy.step(
            self._state, obs, self.with_prediction)
        return sample_actions(logits)

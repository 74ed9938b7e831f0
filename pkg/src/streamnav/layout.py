"""Token layouts for the multi-turn streaming dialogue and their attention masks.

A layout is an ordered list of (segment role, length) pairs: an Instruction
prefix, an optional Memory prefix, then per turn Ctxt_i, Act_i and, when the
prediction branch is attached, Query2D_i and Query3D_i. ``build_mask``
compiles a layout into a boolean attend-permission matrix under one of three
variants:

  strict       navigation tokens attend causally among navigation tokens only
               and never see a query token; query tokens of turn i attend the
               prefix, all navigation tokens of turns <= i, and causally
               within their own same-turn same-modality segment; queries of
               different turns or different modalities never attend each other.
  noiso        strict, except the two query segments of the same turn may
               attend each other (still causally, so later positions see
               earlier ones).
  leaky        plain lower-triangular over the full interleaved sequence, so
               navigation tokens of later turns do see earlier turns' queries.

``check_mask_oracle`` re-derives the same matrices by interpreting the rules
one token pair at a time; it shares no code with ``build_mask`` and exists to
cross-check it.
"""

from dataclasses import dataclass

import numpy as np

INSTRUCTION = "instruction"
MEMORY = "memory"
CTXT = "ctxt"
ACT = "act"
QUERY2D = "query2d"
QUERY3D = "query3d"

NAV_KINDS = (INSTRUCTION, MEMORY, CTXT, ACT)
QUERY_KINDS = (QUERY2D, QUERY3D)
VARIANTS = ("strict", "leaky", "noiso")


@dataclass(frozen=True)
class SegmentRole:
    kind: str
    turn: int | None = None  # None for the Instruction/Memory prefix

    def __post_init__(self):
        if self.kind in (INSTRUCTION, MEMORY):
            if self.turn is not None:
                raise ValueError(f"{self.kind} is a prefix segment, no turn index")
        elif self.kind in NAV_KINDS + QUERY_KINDS:
            if self.turn is None or self.turn < 0:
                raise ValueError(f"{self.kind} needs a turn index >= 0")
        else:
            raise ValueError(f"unknown segment kind {self.kind!r}")

    @property
    def is_nav(self) -> bool:
        return self.kind in NAV_KINDS

    @property
    def is_query(self) -> bool:
        return self.kind in QUERY_KINDS


@dataclass(frozen=True)
class TokenLayout:
    segments: tuple  # of (SegmentRole, length)

    @property
    def total_tokens(self) -> int:
        return sum(n for _, n in self.segments)

    @property
    def num_turns(self) -> int:
        turns = [r.turn for r, _ in self.segments if r.turn is not None]
        return max(turns) + 1 if turns else 0

    @property
    def has_queries(self) -> bool:
        return any(r.is_query for r, _ in self.segments)

    def token_roles(self):
        """Per-token SegmentRole, in layout order."""
        roles = []
        for role, n in self.segments:
            roles.extend([role] * n)
        return roles

    def segment_slices(self):
        """(SegmentRole, slice) per segment, in layout order."""
        out, ofs = [], 0
        for role, n in self.segments:
            out.append((role, slice(ofs, ofs + n)))
            ofs += n
        return out

    def find(self, kind: str, turn: int | None = None) -> slice:
        for role, sl in self.segment_slices():
            if role.kind == kind and role.turn == turn:
                return sl
        raise KeyError(f"no segment ({kind}, turn={turn})")


def build_layout(num_turns: int, len_instruction: int, len_memory: int,
                 len_ctxt: int, len_act: int, queries_per_modality: int = 0,
                 with_queries: bool = False) -> TokenLayout:
    """Segment layout for a streaming dialogue.

    All lengths must be >= 1 except len_memory, which may be 0 (the Memory
    segment is then omitted). Query segments are attached to every turn or to
    none.
    """
    if num_turns < 1:
        raise ValueError("need at least one turn")
    if len_instruction < 1 or len_ctxt < 1 or len_act < 1:
        raise ValueError("segment lengths must be >= 1")
    if len_memory < 0:
        raise ValueError("len_memory must be >= 0")
    if with_queries and queries_per_modality < 1:
        raise ValueError("queries_per_modality must be >= 1 when with_queries")
    segs = [(SegmentRole(INSTRUCTION), len_instruction)]
    if len_memory:
        segs.append((SegmentRole(MEMORY), len_memory))
    for i in range(num_turns):
        segs.append((SegmentRole(CTXT, i), len_ctxt))
        segs.append((SegmentRole(ACT, i), len_act))
        if with_queries:
            segs.append((SegmentRole(QUERY2D, i), queries_per_modality))
            segs.append((SegmentRole(QUERY3D, i), queries_per_modality))
    return TokenLayout(tuple(segs))


def strip_queries(layout: TokenLayout) -> TokenLayout:
    """Remove all query segments, preserving the order of the rest."""
    return TokenLayout(tuple((r, n) for r, n in layout.segments if not r.is_query))


def _token_tables(layout: TokenLayout):
    """Flat per-token arrays: kind code, turn (-1 for prefix), segment id."""
    kinds, turns, seg_ids = [], [], []
    for seg_id, (role, n) in enumerate(layout.segments):
        code = (NAV_KINDS + QUERY_KINDS).index(role.kind)
        t = -1 if role.turn is None else role.turn
        kinds.extend([code] * n)
        turns.extend([t] * n)
        seg_ids.extend([seg_id] * n)
    return np.asarray(kinds), np.asarray(turns), np.asarray(seg_ids)


def build_mask(layout: TokenLayout, variant: str,
               isolated_queries: bool = False) -> np.ndarray:
    """Boolean attend-permission matrix; entry (q, k) true means q may see k.

    isolated_queries narrows within-segment query attention to the token
    itself (singleton queries); it has no effect on navigation rows or the
    leaky variant.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown mask variant {variant!r}")
    kinds, turns, seg_ids = _token_tables(layout)
    n = kinds.size
    pos = np.arange(n)
    causal = pos[None, :] <= pos[:, None]
    if variant == "leaky":
        return causal

    nav = kinds < len(NAV_KINDS)
    is2d = kinds == len(NAV_KINDS)
    is3d = kinds == len(NAV_KINDS) + 1
    mask = np.zeros((n, n), dtype=bool)

    # navigation rows: causal over navigation columns only
    mask[np.ix_(nav, nav)] = causal[np.ix_(nav, nav)]
    # query rows: prefix plus navigation of turns <= own, and own segment causally
    qrows = ~nav
    nav_past = nav[None, :] & (turns[None, :] <= turns[:, None])
    own_seg = seg_ids[None, :] == seg_ids[:, None]
    within = causal if not isolated_queries else pos[None, :] == pos[:, None]
    mask[qrows] = (nav_past | (own_seg & within))[qrows]
    if variant == "noiso":
        same_turn = turns[None, :] == turns[:, None]
        cross = (is2d[:, None] & is3d[None, :]) | (is3d[:, None] & is2d[None, :])
        mask |= same_turn & cross & causal
    return mask


def check_mask_oracle(layout: TokenLayout, variant: str,
                      isolated_queries: bool = False) -> np.ndarray:
    """Slow per-pair interpreter of the mask rules; build_mask's cross-check."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown mask variant {variant!r}")
    roles = layout.token_roles()
    seg_of = []
    for seg_id, (role, length) in enumerate(layout.segments):
        seg_of.extend([seg_id] * length)
    n = len(roles)

    def may_attend(q: int, k: int) -> bool:
        rq, rk = roles[q], roles[k]
        if variant == "leaky":
            return k <= q
        if rq.is_nav:
            return rk.is_nav and k <= q
        # rq is a query token of some turn i
        i = rq.turn
        if rk.is_nav:
            return rk.turn is None or rk.turn <= i
        if seg_of[k] == seg_of[q]:
            return k == q if isolated_queries else k <= q
        if variant == "noiso" and rk.turn == i and rk.kind != rq.kind:
            return k <= q
        return False

    out = np.zeros((n, n), dtype=bool)
    for q in range(n):
        for k in range(n):
            out[q, k] = may_attend(q, k)
    return out


def mask_to_ascii(mask: np.ndarray) -> str:
    """One row per query token, '1' = may attend, '.' = masked."""
    return "\n".join("".join("1" if v else "." for v in row) for row in mask) + "\n"


def mask_to_pgm(mask: np.ndarray) -> str:
    """Plain PGM (P2), one pixel per matrix entry, 255 = may attend."""
    h, w = mask.shape
    lines = ["P2", f"{w} {h}", "255"]
    lines += [" ".join("255" if v else "0" for v in row) for row in mask]
    return "\n".join(lines) + "\n"

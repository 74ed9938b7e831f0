"""Deterministic gridworld navigation: maps, atomic actions, expert planner,
egocentric rendering, instruction templating, and the closed-loop episode
runner.

Geometry: 1 cell = 1 unit, continuous agent position, 24 headings of 15
degrees (h=0 points +x, counterclockwise positive). Forward moves 0.25 units
and is blocked (pose unchanged) when the destination point's cell is occupied
or out of bounds. Text maps put y up: the last text row is y in [0, 1).

The expert is A* over the quarter-unit lattice (x*4, y*4, h) with unit step
costs. Forward edges exist only at the four cardinal headings, where a step
stays exactly on the lattice; at any other heading the expert must turn
first. Ties are broken by the action order Forward < Left < Right.
"""

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .encoders import EncoderDims, DEFAULT_DIMS

FORWARD, LEFT, RIGHT, STOP = 0, 1, 2, 3
ACTION_NAMES = ("Forward", "Left", "Right", "Stop")
N_HEADINGS = 24
STEP_SIZE = 0.25
SUCCESS_RADIUS = 0.36
MAX_EPISODE_STEPS = 200
CHUNK = 4  # atomic actions decoded per policy step

_CARDINAL = {0: (1, 0), 6: (0, 1), 12: (-1, 0), 18: (0, -1)}  # heading -> lattice step

COLOR_LETTERS = "RBYOCMPL"  # landmark palette; index+1 is the color id
COLOR_WORDS = ("red", "blue", "yellow", "orange", "cyan", "magenta", "purple", "lime")


class MapError(ValueError):
    """Malformed or unsolvable map."""


@dataclass(frozen=True)
class AgentPose:
    x: float
    y: float
    h: int  # heading index, angle = 15 deg * h

    def heading_vec(self):
        a = math.radians(15.0 * self.h)
        return math.cos(a), math.sin(a)


@dataclass(frozen=True)
class GridMap:
    width: int
    height: int
    occupied: np.ndarray   # bool [height, width], row 0 = y in [0,1)
    color: np.ndarray      # int  [height, width], 0 = uncolored
    start: AgentPose
    goal: tuple

    def cell(self, x: float, y: float):
        return int(math.floor(x)), int(math.floor(y))

    def blocked_at(self, x: float, y: float) -> bool:
        cx, cy = self.cell(x, y)
        if cx < 0 or cy < 0 or cx >= self.width or cy >= self.height:
            return True
        return bool(self.occupied[cy, cx])

    def color_at(self, x: float, y: float) -> int:
        cx, cy = self.cell(x, y)
        if cx < 0 or cy < 0 or cx >= self.width or cy >= self.height:
            return 0
        return int(self.color[cy, cx])


def parse_map(text: str) -> GridMap:
    """Text map: a "heading=<0..23>" header line, then the grid.

    '#' wall, '.' free, 'S' start, 'G' goal, letters (RBYOCMPL) are colored
    landmark blocks. The first grid line is the top of the map (largest y).
    """
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("heading="):
        raise MapError("first line must be 'heading=<0..23>'")
    try:
        h0 = int(lines[0].split("=", 1)[1])
    except ValueError:
        raise MapError("bad heading value") from None
    if not 0 <= h0 < N_HEADINGS:
        raise MapError("heading out of range")
    rows = lines[1:]
    if not rows:
        raise MapError("empty grid")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise MapError("ragged grid rows")
    height = len(rows)
    occupied = np.zeros((height, width), dtype=bool)
    color = np.zeros((height, width), dtype=np.int64)
    start_cell = goal_cell = None
    for r, row in enumerate(rows):
        y = height - 1 - r
        for x, ch in enumerate(row):
            if ch == "#":
                occupied[y, x] = True
            elif ch == ".":
                pass
            elif ch == "S":
                if start_cell is not None:
                    raise MapError("multiple start cells")
                start_cell = (x, y)
            elif ch == "G":
                if goal_cell is not None:
                    raise MapError("multiple goal cells")
                goal_cell = (x, y)
            elif ch in COLOR_LETTERS:
                occupied[y, x] = True
                color[y, x] = COLOR_LETTERS.index(ch) + 1
            else:
                raise MapError(f"unknown map character {ch!r}")
    if start_cell is None or goal_cell is None:
        raise MapError("map needs exactly one S and one G")
    start = AgentPose(start_cell[0] + 0.5, start_cell[1] + 0.5, h0)
    goal = (goal_cell[0] + 0.5, goal_cell[1] + 0.5)
    return GridMap(width, height, occupied, color, start, goal)


def map_to_text(gmap: GridMap) -> str:
    lines = [f"heading={gmap.start.h}"]
    sx, sy = gmap.cell(gmap.start.x, gmap.start.y)
    gx, gy = gmap.cell(*gmap.goal)
    for r in range(gmap.height):
        y = gmap.height - 1 - r
        row = []
        for x in range(gmap.width):
            if (x, y) == (sx, sy):
                row.append("S")
            elif (x, y) == (gx, gy):
                row.append("G")
            elif gmap.color[y, x]:
                row.append(COLOR_LETTERS[gmap.color[y, x] - 1])
            elif gmap.occupied[y, x]:
                row.append("#")
            else:
                row.append(".")
        lines.append("".join(row))
    return "\n".join(lines) + "\n"


def step_env(gmap: GridMap, pose: AgentPose, action: int):
    """Execute one atomic action; returns (new pose, blocked flag)."""
    if action == FORWARD:
        dx, dy = pose.heading_vec()
        nx, ny = pose.x + STEP_SIZE * dx, pose.y + STEP_SIZE * dy
        if gmap.blocked_at(nx, ny):
            return pose, True
        return AgentPose(nx, ny, pose.h), False
    if action == LEFT:
        return AgentPose(pose.x, pose.y, (pose.h + 1) % N_HEADINGS), False
    if action == RIGHT:
        return AgentPose(pose.x, pose.y, (pose.h - 1) % N_HEADINGS), False
    if action == STOP:
        return pose, False
    raise ValueError(f"unknown action {action}")


# ----------------------------------------------------------------- expert

def expert_plan(gmap: GridMap, start: AgentPose | None = None,
                goal: tuple | None = None,
                success_radius: float = SUCCESS_RADIUS,
                max_expansions: int = 500_000):
    """Minimal action sequence (ending in Stop) reaching the success radius.

    A* on the (x*4, y*4, h) lattice, unit costs, admissible straight-line
    heuristic, ties broken Forward < Left < Right.
    """
    start = start or gmap.start
    goal = goal or gmap.goal
    s0 = (round(start.x * 4), round(start.y * 4), start.h)

    def dist(state):
        return math.hypot(state[0] / 4 - goal[0], state[1] / 4 - goal[1])

    def heur(state):
        return max(0.0, math.ceil(max(0.0, dist(state) - success_radius) / STEP_SIZE))

    if dist(s0) <= success_radius:
        return [STOP]
    frontier = [(heur(s0), 0, s0)]
    came_from = {s0: None}
    g_cost = {s0: 0}
    counter = 0
    expansions = 0
    while frontier:
        _, _, state = heapq.heappop(frontier)
        if dist(state) <= success_radius:
            actions = []
            cur = state
            while came_from[cur] is not None:
                cur, act = came_from[cur]
                actions.append(act)
            actions.reverse()
            return actions + [STOP]
        expansions += 1
        if expansions > max_expansions:
            break
        ix, iy, h = state
        g_here = g_cost[state]
        neighbors = []
        if h in _CARDINAL:
            dx, dy = _CARDINAL[h]
            nx, ny = ix + dx, iy + dy
            if not gmap.blocked_at(nx / 4, ny / 4):
                neighbors.append((FORWARD, (nx, ny, h)))
        neighbors.append((LEFT, (ix, iy, (h + 1) % N_HEADINGS)))
        neighbors.append((RIGHT, (ix, iy, (h - 1) % N_HEADINGS)))
        for act, nxt in neighbors:
            ng = g_here + 1
            if ng < g_cost.get(nxt, float("inf")):
                g_cost[nxt] = ng
                came_from[nxt] = (state, act)
                counter += 1
                heapq.heappush(frontier, (ng + heur(nxt), counter, nxt))
    raise MapError("map is unsolvable from the given start")


# --------------------------------------------------------------- rendering

VIEW_RANGE = 8.0
_RAY_STEP = 0.05
_FRUSTUM_DEG = 90.0


def render_obs(gmap: GridMap, pose: AgentPose,
               dims: EncoderDims = DEFAULT_DIMS) -> np.ndarray:
    """Egocentric image: 16 rays over a 90-degree frustum, left to right.

    Column j encodes its ray as (channel 0) a proximity bar whose height
    grows as the hit gets closer, (channel 1) the hit cell's color id, and
    (channel 2) a goal beacon, uniform down the column: rays that pass
    through the goal cell carry 1 - d/range where d is the distance to the
    cell, regardless of anything solid in between; other columns are zero.
    The beacon is the only through-wall signal, so bearing and closeness of
    the goal stay readable in clutter.
    """
    n_rays = dims.width
    n_rows = dims.height
    base = 15.0 * pose.h
    offsets = np.linspace(_FRUSTUM_DEG / 2, -_FRUSTUM_DEG / 2, n_rays)
    angles = np.radians(base + offsets)
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    ts = np.arange(1, int(VIEW_RANGE / _RAY_STEP) + 1) * _RAY_STEP
    pts = pose.x + dirs[:, None, 0] * ts[None, :], pose.y + dirs[:, None, 1] * ts[None, :]
    cx = np.floor(pts[0]).astype(np.int64)
    cy = np.floor(pts[1]).astype(np.int64)
    inside = (cx >= 0) & (cy >= 0) & (cx < gmap.width) & (cy < gmap.height)
    occ = np.zeros_like(inside)
    col = np.zeros(inside.shape, dtype=np.int64)
    occ[inside] = gmap.occupied[cy[inside], cx[inside]]
    col[inside] = gmap.color[cy[inside], cx[inside]]
    hit = occ | ~inside
    goal_cell = gmap.cell(*gmap.goal)
    at_goal = inside & (cx == goal_cell[0]) & (cy == goal_cell[1])

    img = np.zeros((n_rows, n_rays, dims.channels))
    for j in range(n_rays):
        hits = np.nonzero(hit[j])[0]
        if hits.size and occ[j, hits[0]]:
            first = hits[0]
            d = ts[first]
            color_id = col[j, first]
        else:
            first = ts.size  # nothing solid in range (or ran off the map)
            d = VIEW_RANGE
            color_id = 0
        fill = (1.0 - d / VIEW_RANGE) * n_rows
        k = int(fill)
        img[:k, j, 0] = 1.0
        if k < n_rows:
            img[k, j, 0] = fill - k
        img[:, j, 1] = color_id / len(COLOR_LETTERS)
        if at_goal[j].any():
            img[:, j, 2] = 1.0 - ts[np.argmax(at_goal[j])] / VIEW_RANGE
    return img


# ------------------------------------------------------------ instructions

VOCAB = (
    "<pad>", "go", "head", "forward", "short", "mid", "long", "turn", "left",
    "right", "until", "then", "to", "the", "goal", "stop", "at", "and",
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
    "ten", "eleven", "twelve",
) + COLOR_WORDS
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}
_COUNT_WORDS = VOCAB[18:30]

assert len(VOCAB) <= 64


def _encode(words):
    return np.array([WORD_TO_ID[w] for w in words], dtype=np.int64)


def _facing_color(gmap: GridMap, pose: AgentPose) -> int:
    """Color of the first solid cell straight ahead, 0 if none in range."""
    dx, dy = pose.heading_vec()
    t = _RAY_STEP
    while t <= VIEW_RANGE:
        x, y = pose.x + dx * t, pose.y + dy * t
        if gmap.blocked_at(x, y):
            return gmap.color_at(x, y)
        t += _RAY_STEP
    return 0


def gen_instruction(gmap: GridMap, plan, rng) -> np.ndarray:
    """Templated route description over the fixed vocabulary; token ids."""
    if list(plan) == [STOP]:
        return _encode(["stop"])
    words = [str(rng.choice(["go", "head"]))]
    pose = gmap.start
    i = 0
    first_move = True
    while i < len(plan):
        act = plan[i]
        if act == STOP:
            break
        run = 0
        while i < len(plan) and plan[i] == act:
            run += 1
            i += 1
        if act == FORWARD:
            if not first_move:
                words.append("then")
            color = _facing_color(gmap, pose)
            if color:
                words += ["forward", "until", COLOR_WORDS[color - 1]]
            else:
                bucket = "short" if run <= 3 else ("mid" if run <= 8 else "long")
                words += ["forward", bucket]
            for _ in range(run):
                pose, _ = step_env(gmap, pose, FORWARD)
            first_move = False
        else:
            word = "left" if act == LEFT else "right"
            count = _COUNT_WORDS[min(run, 12) - 1]
            words += ["turn", word, count]
            for _ in range(run):
                pose, _ = step_env(gmap, pose, act)
            first_move = False
    words += ["to", "the", "goal", "stop"]
    return _encode(words)


def decode_instruction(ids) -> str:
    return " ".join(VOCAB[int(i)] for i in ids)


# ------------------------------------------------------------- episode loop

@dataclass
class EpisodeResult:
    path: np.ndarray            # executed positions, (steps+1, 2)
    steps: int
    stop_issued: bool
    collided: bool
    final_distance: float
    distances: np.ndarray       # distance to goal after every pose
    success: bool
    actions: list = field(default_factory=list)


def run_episode(model, gmap: GridMap, instruction,
                max_steps: int = MAX_EPISODE_STEPS,
                success_radius: float = SUCCESS_RADIUS) -> EpisodeResult:
    """Closed loop: render, ask the model for a 4-action chunk, execute.

    Terminates on Stop, on a collision (wall contact fails the episode), or
    at the step cap. Success needs an issued Stop within the radius and a
    collision-free run.
    """
    model.begin_episode(instruction)
    pose = gmap.start
    path = [(pose.x, pose.y)]
    actions = []
    steps = 0
    stop_issued = False
    collided = False
    while steps < max_steps and not stop_issued and not collided:
        obs = render_obs(gmap, pose)
        chunk = model.step(obs)
        for act in list(chunk)[:CHUNK]:
            act = int(act)
            pose, blocked = step_env(gmap, pose, act)
            steps += 1
            path.append((pose.x, pose.y))
            actions.append(act)
            if blocked:
                collided = True
                break
            if act == STOP:
                stop_issued = True
                break
            if steps >= max_steps:
                break
    path = np.asarray(path)
    dists = np.hypot(path[:, 0] - gmap.goal[0], path[:, 1] - gmap.goal[1])
    final = float(dists[-1])
    success = stop_issued and not collided and final <= success_radius
    return EpisodeResult(path, steps, stop_issued, collided, final, dists,
                         success, actions)


class ExpertPolicy:
    """Replays a precomputed plan in 4-action chunks; the metric oracle."""

    def __init__(self, plan):
        self.plan = list(plan)

    def begin_episode(self, instruction):
        self._cursor = 0

    def step(self, obs):
        chunk = self.plan[self._cursor:self._cursor + CHUNK]
        self._cursor += CHUNK
        while len(chunk) < CHUNK:
            chunk = chunk + [STOP]
        return chunk


# ---------------------------------------------------------- map generation

def random_map(rng, width: int = 9, height: int = 9, n_blocks: int = 5,
               n_landmarks: int = 2, min_goal_dist: float = 2.0,
               max_goal_dist: float = 4.5, max_tries: int = 200,
               headings=None, max_plan: int = 31) -> GridMap:
    """Bordered random map with colored landmark blocks, guaranteed solvable
    with a plan of at most max_plan atomic actions.

    headings restricts the start heading choices (e.g. the four cardinals,
    which keep every expert turn run at a quarter or half rotation)."""
    choices = tuple(range(N_HEADINGS)) if headings is None else tuple(headings)
    for _ in range(max_tries):
        occupied = np.zeros((height, width), dtype=bool)
        occupied[0, :] = occupied[-1, :] = True
        occupied[:, 0] = occupied[:, -1] = True
        color = np.zeros((height, width), dtype=np.int64)
        interior = [(x, y) for x in range(1, width - 1) for y in range(1, height - 1)]
        picks = rng.choice(len(interior), size=min(n_blocks + n_landmarks + 2,
                                                   len(interior)), replace=False)
        cells = [interior[i] for i in picks]
        blocks, landmarks = cells[:n_blocks], cells[n_blocks:n_blocks + n_landmarks]
        sx, sy = cells[-2]
        gx, gy = cells[-1]
        d = math.hypot(gx - sx, gy - sy)
        if not min_goal_dist <= d <= max_goal_dist:
            continue
        for x, y in blocks:
            occupied[y, x] = True
        for k, (x, y) in enumerate(landmarks):
            occupied[y, x] = True
            color[y, x] = (k % len(COLOR_LETTERS)) + 1
        h0 = int(choices[rng.integers(0, len(choices))])
        start = AgentPose(sx + 0.5, sy + 0.5, h0)
        gmap = GridMap(width, height, occupied, color, start, (gx + 0.5, gy + 0.5))
        try:
            plan = expert_plan(gmap, max_expansions=60_000)
        except MapError:
            continue
        if len(plan) <= max_plan:
            return gmap
    raise MapError("could not generate a solvable map within the try budget")

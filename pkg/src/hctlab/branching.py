"""Branch detection and the tree of permanently disjoint wave packets.

A component of the density above the occupation floor `eps_cell`, separated
from every other component by at least `gap_cells` empty cells, is an
epsilon-support. The tracker evolves one packet per live tree node alongside
the universal state; when a node's packet separates into several components a
provisional split is recorded, and the split survives only if the sibling
supports stay gap-disjoint at every later record time up to the horizon.
Splits whose siblings come back into contact are rolled back into the parent.

The partial order on supports is realized through tree ancestry: an earlier
support precedes a later one exactly when the later node descends from (or
is) the earlier node, which is when the later support lies inside the
earlier packet's evolved support.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import (
    ConfigurationError,
    DegenerateStateError,
    LeakageError,
    TrackingError,
)
from .qdyn import (
    PhysicalParams,
    Potential,
    SpatialGrid,
    WaveFunction,
    _evolve_array,
    born_mass,
    project,
)


@dataclass(frozen=True)
class DisjointParams:
    """Thresholds for the epsilon-support idealization of exact disjointness.

    eps_cell:  density floor (per unit volume) defining occupied cells.
    gap_cells: minimum count of empty cells separating distinct components.
    eps_branch: minimum mass for a component to count as a branch.
    eps_leak:  tolerated probability mass outside all tracked supports.
    """

    eps_cell: float = 1e-8
    gap_cells: int = 3
    eps_branch: float = 1e-4
    eps_leak: float = 1e-3

    def __post_init__(self):
        if min(self.eps_cell, self.eps_branch, self.eps_leak) <= 0 or self.gap_cells <= 0:
            raise ConfigurationError("all disjointness thresholds must be positive")
        if self.eps_branch >= self.eps_leak:
            raise ConfigurationError(
                "eps_branch must stay below eps_leak so that dropped components "
                "fit in the leak budget"
            )


@dataclass
class EpsSupport:
    """One detected component: cell mask, its Born mass, and the snapshot time."""

    mask: np.ndarray
    mass: float
    time: float

    @property
    def rectangles(self):
        return mask_to_rects(self.mask)


# ---------------------------------------------------------------------------
# component detection


def _structure(dim: int) -> np.ndarray:
    return np.ones((3,) * dim, dtype=bool)


def detect_components(psi: WaveFunction, params: DisjointParams) -> list[EpsSupport]:
    """Epsilon-supports of |psi|^2, gap-merged and mass-filtered.

    Components whose cells come within a Chebyshev distance of `gap_cells`
    are merged (separated means >= gap_cells strictly empty cells between).
    Returned supports are sorted by their lexicographically lowest corner.
    """
    return _detect_on_density(psi.density(), psi.grid, psi.time, params)


def _detect_on_density(
    dens: np.ndarray, grid: SpatialGrid, time: float, params: DisjointParams
) -> list[EpsSupport]:
    occupied = dens > params.eps_cell
    if not occupied.any():
        raise DegenerateStateError("no cell above the eps_cell density floor")
    labels, n_raw = ndimage.label(occupied, structure=_structure(grid.dim))
    groups = _merge_labels(labels, n_raw, occupied, params.gap_cells, grid.dim)

    supports = []
    for members in groups:
        mask = np.isin(labels, members)
        mass = float(dens[mask].sum() * grid.dvol)
        if mass > params.eps_branch:
            supports.append(EpsSupport(mask, mass, time))
    if not supports:
        raise DegenerateStateError("every component is below eps_branch")
    supports.sort(key=lambda s: _lowest_corner(s.mask))
    return supports


def _merge_labels(labels, n_raw, occupied, gap_cells, dim):
    """Union-find over raw labels whose sets come within gap_cells cells."""
    parent = list(range(n_raw + 1))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    if n_raw > 1:
        struct = _structure(dim)
        for lab in range(1, n_raw + 1):
            grown = ndimage.binary_dilation(
                labels == lab, structure=struct, iterations=gap_cells
            )
            touched = np.unique(labels[grown & occupied])
            for other in touched:
                if other > lab:
                    union(lab, int(other))

    groups: dict[int, list[int]] = {}
    for lab in range(1, n_raw + 1):
        groups.setdefault(find(lab), []).append(lab)
    return list(groups.values())


def _lowest_corner(mask: np.ndarray):
    idx = np.argwhere(mask)
    order = np.lexsort(tuple(idx[:, i] for i in range(idx.shape[1] - 1, -1, -1)))
    return tuple(int(v) for v in idx[order[0]])


def masks_gap_disjoint(a: np.ndarray, b: np.ndarray, gap_cells: int) -> bool:
    """True when every cell pair across the masks is > gap_cells apart."""
    if not (a.any() and b.any()):
        return True
    grown = ndimage.binary_dilation(a, structure=_structure(a.ndim), iterations=gap_cells)
    return not bool((grown & b).any())


def mask_to_rects(mask: np.ndarray) -> list:
    """Tile a mask with half-open index rectangles (row runs, merged rows)."""
    if mask.ndim == 1:
        return [[[int(s), int(e)]] for s, e in _runs(mask)]
    rects = []
    open_rects: dict[tuple, list] = {}
    for i in range(mask.shape[0]):
        row_runs = set((int(s), int(e)) for s, e in _runs(mask[i]))
        next_open: dict[tuple, list] = {}
        for run in row_runs:
            if run in open_rects:
                rect = open_rects.pop(run)
                rect[0][1] = i + 1
                next_open[run] = rect
            else:
                next_open[run] = [[i, i + 1], [run[0], run[1]]]
        rects.extend(open_rects.values())
        open_rects = next_open
    rects.extend(open_rects.values())
    return sorted(rects)


def _runs(row: np.ndarray):
    padded = np.concatenate([[False], row.astype(bool), [False]])
    flips = np.flatnonzero(padded[1:] != padded[:-1])
    return zip(flips[0::2], flips[1::2])


def rects_to_mask(rects, shape) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for rect in rects:
        if len(shape) == 1:
            (s, e), = rect
            mask[s:e] = True
        else:
            (i0, i1), (j0, j1) = rect
            mask[i0:i1, j0:j1] = True
    return mask


# ---------------------------------------------------------------------------
# the tree


@dataclass
class PDINode:
    id: int
    parent: int | None
    birth_index: int
    mass_at_birth: float
    split_index: int | None = None
    children: list[int] = field(default_factory=list)
    confirmed: bool = False
    supports: dict[int, np.ndarray] = field(default_factory=dict)
    masses: dict[int, float] = field(default_factory=dict)
    derived: set[int] = field(default_factory=set)

    def alive_at(self, index: int) -> bool:
        if index < self.birth_index:
            return False
        return self.split_index is None or index < self.split_index


@dataclass
class BranchTree:
    grid: SpatialGrid
    record_times: np.ndarray
    params: DisjointParams
    nodes: dict[int, PDINode]
    root_id: int = 0

    @property
    def horizon(self) -> float:
        return float(self.record_times[-1])

    @property
    def last_index(self) -> int:
        return len(self.record_times) - 1

    def index_of_time(self, t: float) -> int:
        idx = int(np.argmin(np.abs(self.record_times - t)))
        if abs(self.record_times[idx] - t) > 1e-9 * max(1.0, abs(t)) + 1e-12:
            raise ValueError(f"t={t} is not a record time")
        return idx

    def alive_at(self, index: int) -> list[int]:
        return sorted(nid for nid, n in self.nodes.items() if n.alive_at(index))

    def leaves(self) -> list[int]:
        return self.alive_at(self.last_index)

    def leaves_under(self, node_id: int) -> list[int]:
        node = self.nodes[node_id]
        if not node.children:
            return [node_id]
        out = []
        for c in node.children:
            out.extend(self.leaves_under(c))
        return sorted(out)

    def is_ancestor_or_self(self, a: int, b: int) -> bool:
        cur: int | None = b
        while cur is not None:
            if cur == a:
                return True
            cur = self.nodes[cur].parent
        return False

    def support_at(self, node_id: int, index: int) -> np.ndarray:
        """Recorded (or derived union-of-descendants) support at a record index."""
        node = self.nodes[node_id]
        if index in node.supports:
            return node.supports[index]
        raise KeyError(f"node {node_id} has no recorded support at index {index}")

    def mass_at(self, node_id: int, index: int) -> float:
        return self.nodes[node_id].masses[index]

    def compare(self, a: int, t_a: float, b: int, t_b: float) -> str:
        """Partial order on supports: 'equal', 'a<=b', 'b<=a', 'incomparable'."""
        ia, ib = self.index_of_time(t_a), self.index_of_time(t_b)
        for nid, idx in ((a, ia), (b, ib)):
            if not self.nodes[nid].alive_at(idx):
                raise ValueError(f"node {nid} is not alive at index {idx}")
        le_ab = t_a <= t_b and self.is_ancestor_or_self(a, b)
        le_ba = t_b <= t_a and self.is_ancestor_or_self(b, a)
        if le_ab and le_ba:
            return "equal"
        if le_ab:
            return "a<=b"
        if le_ba:
            return "b<=a"
        return "incomparable"

    def tracked_mass(self, index: int) -> float:
        return sum(self.nodes[n].masses[index] for n in self.alive_at(index))

    # -- serialization ------------------------------------------------------

    def to_json_dict(self) -> dict:
        nodes = []
        for nid in sorted(self.nodes):
            n = self.nodes[nid]
            history = []
            for idx in sorted(n.supports):
                history.append(
                    {
                        "index": idx,
                        "t": float(self.record_times[idx]),
                        "mass": n.masses[idx],
                        "rects": mask_to_rects(n.supports[idx]),
                        "derived": idx in n.derived,
                    }
                )
            nodes.append(
                {
                    "id": n.id,
                    "parent": n.parent,
                    "birth_index": n.birth_index,
                    "birth_time": float(self.record_times[n.birth_index]),
                    "split_index": n.split_index,
                    "mass_at_birth": n.mass_at_birth,
                    "children": sorted(n.children),
                    "confirmed": n.confirmed,
                    "history": history,
                }
            )
        return {
            "record_times": [float(t) for t in self.record_times],
            "horizon": self.horizon,
            "grid": {"extents": [list(e) for e in self.grid.extents], "n": list(self.grid.n)},
            "params": {
                "eps_cell": self.params.eps_cell,
                "gap_cells": self.params.gap_cells,
                "eps_branch": self.params.eps_branch,
                "eps_leak": self.params.eps_leak,
            },
            "nodes": nodes,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def from_json_dict(cls, doc: dict) -> "BranchTree":
        grid = SpatialGrid(
            tuple(tuple(e) for e in doc["grid"]["extents"]), tuple(doc["grid"]["n"])
        )
        params = DisjointParams(**doc["params"])
        nodes = {}
        for nd in doc["nodes"]:
            node = PDINode(
                id=nd["id"],
                parent=nd["parent"],
                birth_index=nd["birth_index"],
                mass_at_birth=nd["mass_at_birth"],
                split_index=nd["split_index"],
                children=list(nd["children"]),
                confirmed=nd["confirmed"],
            )
            for row in nd["history"]:
                node.supports[row["index"]] = rects_to_mask(row["rects"], grid.n)
                node.masses[row["index"]] = row["mass"]
                if row["derived"]:
                    node.derived.add(row["index"])
            nodes[node.id] = node
        return cls(grid, np.asarray(doc["record_times"]), params, nodes)

    def render_text(self) -> str:
        lines = []

        def walk(nid, depth):
            n = self.nodes[nid]
            tag = "leaf" if not n.children else f"split@{self.record_times[n.split_index]:.4g}"
            lines.append(
                "  " * depth
                + f"node {nid}: born t={self.record_times[n.birth_index]:.4g} "
                + f"mass={n.mass_at_birth:.6f} [{tag}]"
            )
            for c in sorted(n.children):
                walk(c, depth + 1)

        walk(self.root_id, 0)
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# the tracker


class BranchTracker:
    """Builds the branch tree from record-time snapshots of the state.

    One wave packet per live node evolves with the same propagator as the
    universal state; `update` must be called at each successive record time
    with the full state (used for the leak audit and the component
    cross-check), and `finalize` at the horizon.
    """

    def __init__(
        self,
        grid: SpatialGrid,
        potential: Potential,
        phys: PhysicalParams,
        params: DisjointParams,
    ):
        self.grid = grid
        self.potential = potential
        self.phys = phys
        self.params = params
        self.record_times: list[float] = []
        self.nodes: dict[int, PDINode] = {}
        self._packets: dict[int, np.ndarray] = {}
        self._next_id = 0
        self._started = False

    # -- lifecycle ----------------------------------------------------------

    def begin(self, psi0: WaveFunction) -> None:
        comps = detect_components(psi0, self.params)
        if len(comps) != 1:
            raise TrackingError(
                f"initial state has {len(comps)} components; the root must be "
                "a single packet"
            )
        root = PDINode(
            id=self._allocate_id(),
            parent=None,
            birth_index=0,
            mass_at_birth=comps[0].mass,
        )
        root.supports[0] = comps[0].mask
        root.masses[0] = comps[0].mass
        self.nodes[root.id] = root
        self._packets[root.id] = psi0.amps.copy()
        self.record_times.append(psi0.time)
        self._started = True
        self._audit(psi0, 0)

    def update(self, psi_t: WaveFunction) -> None:
        """Advance the live packets to psi_t.time and process the snapshot."""
        if not self._started:
            self.begin(psi_t)
            return
        t_prev = self.record_times[-1]
        span = psi_t.time - t_prev
        n_steps = int(round(span / self.phys.dt))
        if n_steps < 1 or abs(span - n_steps * self.phys.dt) > 1e-9:
            raise ValueError("record times must advance by multiples of dt")
        index = len(self.record_times)
        self.record_times.append(psi_t.time)

        for nid in list(self._packets):
            self._packets[nid] = _evolve_array(
                self._packets[nid], t_prev, self.grid, self.potential, self.phys, n_steps
            )

        for nid in sorted(self._packets):
            self._observe_node(nid, index, psi_t.time)

        self._rollback_contacts(index)
        self._audit(psi_t, index)

    def finalize(self, psi_T: WaveFunction | None = None) -> BranchTree:
        """Confirm surviving splits and derive internal-node histories."""
        if psi_T is not None and abs(psi_T.time - self.record_times[-1]) > 1e-9:
            self.update(psi_T)
        for node in self.nodes.values():
            node.confirmed = True
        last = len(self.record_times) - 1
        self._derive_internal_histories(last)
        tree = BranchTree(
            self.grid,
            np.asarray(self.record_times),
            self.params,
            self.nodes,
        )
        for index in range(last + 1):
            alive = tree.alive_at(index)
            for i, a in enumerate(alive):
                for b in alive[i + 1:]:
                    inter = tree.nodes[a].supports[index] & tree.nodes[b].supports[index]
                    if inter.any():
                        raise TrackingError(
                            f"confirmed supports {a} and {b} overlap at index {index}"
                        )
        return tree

    # -- internals ----------------------------------------------------------

    def _allocate_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def _observe_node(self, nid: int, index: int, t: float) -> None:
        node = self.nodes[nid]
        dens = np.abs(self._packets[nid]) ** 2
        comps = _detect_on_density(dens, self.grid, t, self.params)
        if len(comps) == 1:
            node.supports[index] = comps[0].mask
            node.masses[index] = comps[0].mass
            return
        # provisional split: the parent records the union, children the parts
        union = np.zeros(self.grid.n, dtype=bool)
        for c in comps:
            union |= c.mask
        node.supports[index] = union
        node.masses[index] = sum(c.mass for c in comps)
        node.derived.add(index)
        node.split_index = index
        parent_amps = self._packets.pop(nid)
        for comp in comps:
            child = PDINode(
                id=self._allocate_id(),
                parent=nid,
                birth_index=index,
                mass_at_birth=comp.mass,
            )
            child.supports[index] = comp.mask
            child.masses[index] = comp.mass
            node.children.append(child.id)
            self.nodes[child.id] = child
            self._packets[child.id] = np.where(comp.mask, parent_amps, 0.0)

    def _rollback_contacts(self, index: int) -> None:
        """Collapse subtrees whose live supports came back within the gap."""
        changed = True
        while changed:
            changed = False
            live = sorted(self._packets)
            for i, a in enumerate(live):
                for b in live[i + 1:]:
                    sa = self.nodes[a].supports[index]
                    sb = self.nodes[b].supports[index]
                    if not masks_gap_disjoint(sa, sb, self.params.gap_cells):
                        self._rollback(self._lca(a, b), index)
                        changed = True
                        break
                if changed:
                    break

    def _lca(self, a: int, b: int) -> int:
        ancestors = set()
        cur: int | None = a
        while cur is not None:
            ancestors.add(cur)
            cur = self.nodes[cur].parent
        cur = b
        while cur not in ancestors:
            cur = self.nodes[cur].parent
        return int(cur)

    def _rollback(self, nid: int, index: int) -> None:
        """Re-merge: delete nid's subtree, resume nid live with the summed packet."""
        node = self.nodes[nid]
        amps = np.zeros(self.grid.n, dtype=np.complex128)
        stack = list(node.children)
        doomed = []
        while stack:
            cid = stack.pop()
            doomed.append(cid)
            stack.extend(self.nodes[cid].children)
            if cid in self._packets:
                amps = amps + self._packets.pop(cid)
        for cid in doomed:
            del self.nodes[cid]
        node.children = []
        node.split_index = None
        self._packets[nid] = amps
        dens = np.abs(amps) ** 2
        comps = _detect_on_density(dens, self.grid, self.record_times[index], self.params)
        union = np.zeros(self.grid.n, dtype=bool)
        for c in comps:
            union |= c.mask
        node.supports[index] = union
        node.masses[index] = sum(c.mass for c in comps)
        node.derived.discard(index)

    def _derive_internal_histories(self, last: int) -> None:
        """Fill post-split rows of internal nodes with unions of descendants."""
        by_depth = sorted(self.nodes.values(), key=lambda n: -self._depth(n.id))
        for node in by_depth:
            if node.split_index is None:
                continue
            for index in range(node.split_index + 1, last + 1):
                mask = np.zeros(self.grid.n, dtype=bool)
                mass = 0.0
                complete = True
                for cid in node.children:
                    child = self.nodes[cid]
                    if index not in child.supports:
                        complete = False
                        break
                    mask |= child.supports[index]
                    mass += child.masses[index]
                if complete:
                    node.supports[index] = mask
                    node.masses[index] = mass
                    node.derived.add(index)

    def _depth(self, nid: int) -> int:
        d = 0
        cur = self.nodes[nid].parent
        while cur is not None:
            d += 1
            cur = self.nodes[cur].parent
        return d

    def _audit(self, psi_t: WaveFunction, index: int) -> None:
        live = sorted(self._packets)
        union = np.zeros(self.grid.n, dtype=bool)
        for nid in live:
            union |= self.nodes[nid].supports[index]
        tracked = born_mass(psi_t, union)
        if tracked < 1.0 - self.params.eps_leak:
            raise LeakageError(
                f"tracked mass {tracked:.6f} at t={psi_t.time:g} fell below "
                f"1 - eps_leak = {1 - self.params.eps_leak:.6f}"
            )
        # cross-check: no full-state component may straddle two live supports
        dens = psi_t.density()
        try:
            full = _detect_on_density(dens, self.grid, psi_t.time, self.params)
        except DegenerateStateError:
            return
        for comp in full:
            owners = []
            for nid in live:
                overlap = float(
                    dens[comp.mask & self.nodes[nid].supports[index]].sum()
                    * self.grid.dvol
                )
                if overlap > self.params.eps_branch:
                    owners.append(nid)
            if len(owners) > 1:
                raise TrackingError(
                    f"component at t={psi_t.time:g} overlaps supports {owners}",
                    diagnostics={
                        "time": psi_t.time,
                        "component_rects": mask_to_rects(comp.mask),
                        "owners": owners,
                    },
                )


def update_tree(tracker: BranchTracker, psi_t: WaveFunction) -> BranchTracker:
    """Record-time snapshot update (method wrapper for the tracker)."""
    tracker.update(psi_t)
    return tracker


# ---------------------------------------------------------------------------
# chain projections


def chain_projection(
    psi_t1: WaveFunction,
    chain: list[tuple[np.ndarray, float]],
    potential: Potential,
    phys: PhysicalParams,
) -> tuple[WaveFunction, dict]:
    """E(S_n) U(t_n - t_{n-1}) ... U(t_2 - t_1) E(S_1) psi(t_1).

    Returns the projected-evolved state plus a report with its norm and the
    residual against the single-projection reference E(S_n) psi(t_n).
    """
    if not chain:
        raise ValueError("chain must not be empty")
    times = [t for _, t in chain]
    if any(t2 < t1 for t1, t2 in zip(times, times[1:])):
        raise ValueError("chain times must be ascending")
    if abs(times[0] - psi_t1.time) > 1e-9:
        raise ValueError("chain must start at the state's own time")

    grid = psi_t1.grid
    dvol = grid.dvol

    def steps_between(t1, t2):
        n = int(round((t2 - t1) / phys.dt))
        if abs((t2 - t1) - n * phys.dt) > 1e-9:
            raise ValueError("chain times must lie on the dt lattice")
        return n

    state = project(psi_t1, chain[0][0])
    for (mask_prev, t_prev), (mask, t) in zip(chain, chain[1:]):
        n = steps_between(t_prev, t)
        amps = state.amps
        if n > 0:
            amps = _evolve_array(amps, t_prev, grid, potential, phys, n)
        state = project(WaveFunction(grid, amps, t), mask)

    n_total = steps_between(times[0], times[-1])
    ref_amps = psi_t1.amps
    if n_total > 0:
        ref_amps = _evolve_array(ref_amps, times[0], grid, potential, phys, n_total)
    reference = project(WaveFunction(grid, ref_amps, times[-1]), chain[-1][0])

    diff = state.amps - reference.amps
    report = {
        "result_norm": float(np.sqrt((np.abs(state.amps) ** 2).sum() * dvol)),
        "reference_norm": float(np.sqrt((np.abs(reference.amps) ** 2).sum() * dvol)),
        "residual_norm": float(np.sqrt((np.abs(diff) ** 2).sum() * dvol)),
        "length": len(chain),
    }
    return state, report

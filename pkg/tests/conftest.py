"""Shared fixtures and the exhaustive split-layout oracle.

The datasets here are deliberately small; anything that needs statistical
power builds its own inside the test.
"""

from itertools import permutations, product

import pytest

from nsp import SessionConfig, gen_reach_session, gen_spike_trace, tier_config


@pytest.fixture(scope="session")
def easy_trace():
    """(RawTrace, GroundTruthLabels) for a 4-channel easy-tier recording."""
    return gen_spike_trace(tier_config("easy", n_channels=4, duration_s=8.0), seed=11)


@pytest.fixture(scope="session")
def hard_trace():
    return gen_spike_trace(tier_config("hard", n_channels=2, duration_s=8.0), seed=23)


@pytest.fixture(scope="session")
def small_session():
    return gen_reach_session(SessionConfig(n_units=24, trials_per_target=4), seed=5)


# --- exhaustive two-feature split-layout oracle -----------------------------
#
# Independent enumeration of every way three nested axis-aligned cuts can
# carve the feature plane into four labelled rectangles. Layouts are rendered
# on a 4x4 cell grid and canonicalised, so the result can be compared against
# the pattern table without sharing any of its machinery.

LEAF = "leaf"


def tree_shapes(n):
    """All binary trees with n internal nodes, as nested (left, right) pairs."""
    if n == 0:
        return [LEAF]
    out = []
    for n_left in range(n):
        for left in tree_shapes(n_left):
            for right in tree_shapes(n - 1 - n_left):
                out.append((left, right))
    return out


def decorate(shape, axes, cuts):
    """Assign axes/cut values to internal nodes (preorder) and number leaves."""
    counter = {"node": 0, "leaf": 0}

    def walk(node):
        if node == LEAF:
            idx = counter["leaf"]
            counter["leaf"] += 1
            return ("leaf", idx)
        i = counter["node"]
        counter["node"] += 1
        return ("cut", axes[i], cuts[i], walk(node[0]), walk(node[1]))

    return walk(shape)


def classify_tree(tree, x, y):
    while tree[0] == "cut":
        _, axis, value, left, right = tree
        tree = right if (x, y)[axis] >= value else left
    return tree[1]


def grid_signature(classify):
    """Canonical signature of a 4x4 label grid, or None if <4 labels appear.

    Collapses duplicate neighbouring rows and columns, relabels by first
    appearance, and takes the minimum over transposition — two cut layouts
    share a signature exactly when one slides/flips into the other.
    """
    grid = [[classify(x + 0.5, y + 0.5) for x in range(4)] for y in range(4)]
    if len({v for row in grid for v in row}) != 4:
        return None
    rows = [grid[0]] + [r for prev, r in zip(grid, grid[1:]) if r != prev]
    cols = list(zip(*rows))
    cols = [cols[0]] + [c for prev, c in zip(cols, cols[1:]) if c != prev]

    def key(columns):
        relabel, flat = {}, []
        for col in columns:
            for v in col:
                flat.append(relabel.setdefault(v, len(relabel)))
        return (len(columns), len(columns[0]), tuple(flat))

    return min(key(cols), key(list(zip(*cols))))


def oracle_pattern_classes():
    """Every distinct comparison template, by brute force.

    A template is a cut tree with an axis per node; its three boundary values
    stay programmable, so one template realises every layout reachable by
    permuting the values (1, 2, 3) over its cuts. Distinct values keep the
    cuts in general position: coinciding same-axis cuts collapse into a
    degenerate hybrid (e.g. both slabs split at the same height looks like
    plain quadrants) that is not a layout of its own. Two templates are the
    same pattern exactly when they realise the same set of canonical layouts,
    so the return value is a set of frozensets of grid signatures.
    """
    classes = set()
    for shape in tree_shapes(3):
        for axes in product((0, 1), repeat=3):
            sigs = set()
            for cuts in permutations((1, 2, 3)):
                tree = decorate(shape, axes, cuts)
                sig = grid_signature(lambda x, y: classify_tree(tree, x, y))
                if sig is not None:
                    sigs.add(sig)
            if sigs:
                classes.add(frozenset(sigs))
    return classes


def library_pattern_classes(patterns):
    """Realisable-layout set of each table pattern, via its public classify."""
    classes = []
    for pat in patterns:
        sigs = set()
        for vals in permutations((1, 2, 3)):
            sig = grid_signature(
                lambda x, y: pat.leaf_map[pat.code_of(x, y, vals)])
            if sig is not None:
                sigs.add(sig)
        classes.append(frozenset(sigs))
    return classes

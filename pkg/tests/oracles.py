"""Independent reference implementations used to check the metric suite.

Everything here is deliberately written as plain loops over scalars so it
shares no code path with the package's vectorized implementations.
"""

import math

import numpy as np

LDDT_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)


def pair_distance(a, b):
    dx = a[0] - b[0]
    dy = a[1] - b[1]
    dz = a[2] - b[2]
    return math.sqrt(dx * dx + dy * dy + dz * dz)


def lddt_bruteforce(decoy_ca, native_ca, radius=15.0, thresholds=LDDT_THRESHOLDS):
    """Per-residue LDDT by exhaustive pair and threshold enumeration."""
    m = len(decoy_ca)
    scores = []
    for i in range(m):
        errors = []
        for j in range(m):
            if j == i:
                continue
            dn = pair_distance(native_ca[i], native_ca[j])
            if dn < radius:
                dd = pair_distance(decoy_ca[i], decoy_ca[j])
                errors.append(abs(dd - dn))
        if not errors:
            scores.append(float("nan"))
            continue
        total = 0.0
        for t in thresholds:
            kept = 0
            for e in errors:
                if e < t:
                    kept += 1
            total += kept / len(errors)
        scores.append(total / len(thresholds))
    defined = [s for s in scores if not math.isnan(s)]
    # the final aggregation is not part of the enumeration being checked;
    # use the same reduction as the implementation so equality is exact
    return scores, float(np.mean(defined))


def contacts_bruteforce(structure, cutoff=5.0):
    """Cross-chain residue contacts by an exhaustive atom-pair scan."""
    atoms = structure.atoms()
    found = set()
    for a in atoms:
        for b in atoms:
            if a.chain_id >= b.chain_id:
                continue
            if pair_distance(a.coord, b.coord) < cutoff:
                key_a = (a.chain_id, a.residue_index)
                key_b = (b.chain_id, b.residue_index)
                found.add(tuple(sorted((key_a, key_b))))
    return found


def superposed_rmsd_by_trace(mobile, target):
    """Minimum RMSD via the singular-value trace identity (no transform)."""
    mobile = np.asarray(mobile, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    m = mobile.shape[0]
    p = mobile - mobile.mean(axis=0)
    q = target - target.mean(axis=0)
    s = np.linalg.svd(p.T @ q, compute_uv=False)
    u, _, vt = np.linalg.svd(p.T @ q)
    if np.linalg.det(vt.T @ u.T) < 0:
        s = s.copy()
        s[-1] = -s[-1]
    value = (p ** 2).sum() + (q ** 2).sum() - 2.0 * s.sum()
    return math.sqrt(max(value, 0.0) / m)

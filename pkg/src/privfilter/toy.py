"""Desk-scale synthetic datasets: one Gaussian cluster per patient."""

from __future__ import annotations

import numpy as np

from .dataset import DatasetManifest, validate_manifest


def gen_toy(
    patients: int,
    images_per_patient: int,
    d: int,
    cluster_sd: float = 0.3,
    seed: int = 0,
    singletons: int = 0,
    near_duplicates: int = 0,
    duplicate_noise: float = 0.0,
    space: str = "latent",
) -> DatasetManifest:
    """Build a toy manifest.

    Each of ``patients`` patients gets a standard-normal center in R^d and
    ``images_per_patient`` images at ``center + N(0, cluster_sd^2)``.
    ``singletons`` extra patients get one image each. ``near_duplicates``
    synthetic records copy a random multi-image patient's image plus
    ``N(0, duplicate_noise^2)`` noise and carry that patient as source.
    """
    if patients < 2:
        raise ValueError("need at least 2 patients")
    if images_per_patient < 1 or d < 2:
        raise ValueError("images_per_patient >= 1 and d >= 2 required")
    if cluster_sd < 0 or duplicate_noise < 0:
        raise ValueError("noise levels must be non-negative")
    if singletons < 0 or near_duplicates < 0:
        raise ValueError("counts must be non-negative")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((patients, d))
    ids, pids, roles, sources, vecs = [], [], [], [], []
    for p in range(patients):
        noise = rng.standard_normal((images_per_patient, d)) * cluster_sd
        for j in range(images_per_patient):
            ids.append(f"p{p:04d}_i{j:03d}")
            pids.append(f"p{p:04d}")
            roles.append("")
            sources.append(None)
            vecs.append(centers[p] + noise[j])
    for s in range(singletons):
        ids.append(f"s{s:04d}_i000")
        pids.append(f"s{s:04d}")
        roles.append("")
        sources.append(None)
        vecs.append(rng.standard_normal(d))
    n_real = len(vecs)
    n_cluster = patients * images_per_patient
    for q in range(near_duplicates):
        src = int(rng.integers(0, n_cluster))
        dup = np.array(vecs[src], dtype=np.float32).astype(np.float64)
        if duplicate_noise > 0:
            dup = dup + rng.standard_normal(d) * duplicate_noise
        ids.append(f"syn{q:05d}")
        pids.append(f"syn{q:05d}")
        roles.append("synthetic")
        sources.append(pids[src])
        vecs.append(dup)
    assert len(vecs) == n_real + near_duplicates
    m = DatasetManifest(
        dimension=d,
        space=space,
        image_ids=ids,
        patient_ids=pids,
        roles=roles,
        source_patient_ids=sources,
        vectors=np.asarray(vecs, dtype=np.float32),
    )
    validate_manifest(m)
    return m

from privfilter.dataset import SplitPlan, make_manifest


def plan_from_roles(manifest, roles, seed=0):
    return SplitPlan(seed=seed, roles=dict(zip(manifest.image_ids, roles)))


def manifest_from_groups(groups, space="latent"):
    """groups: list of (role, patient_id, vector[, source]). Image ids are generated."""
    recs, roles, sources = [], [], []
    for n, g in enumerate(groups):
        role, pid, vec = g[:3]
        recs.append((f"img{n:05d}", pid, vec))
        roles.append(role)
        sources.append(g[3] if len(g) > 3 else None)
    manifest_roles = ["synthetic" if r == "synthetic" else "" for r in roles]
    m = make_manifest(recs, space=space, roles=manifest_roles, sources=sources)
    return m, plan_from_roles(m, roles)

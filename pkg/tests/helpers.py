import numpy as np

from sydnet.attention import HeadConfig, PbAHead
from sydnet.model import SYDNet
from sydnet.patches import PatchSet, PatchSpec, custom_patch_set

# PASS/FAIL lines from the acceptance checks, echoed in the pytest terminal summary.
ACCEPTANCE_LINES: list[str] = []


def patch_set_for(n, grid=6):
    if n == 1:
        return custom_patch_set("H1", grid, hierarchical=1)
    if n == 3:
        return PatchSet("Q3", grid, uniform=(PatchSpec(0, 0, grid // 2, grid // 2),
                                             PatchSpec(grid // 2, grid // 2, grid // 2, grid // 2)),
                        hierarchical=(PatchSpec(0, 0, grid, grid),))
    return custom_patch_set(f"U{n}", grid, uniform_side=grid // int(round(n ** 0.5)))


def random_head_model(n=3, c=4, hw=2, n_classes=3, seed=0, scale=0.7, dtype=np.float64, **cfg_kw):
    """Head-only model (imported features) with every tensor randomised."""
    rng = np.random.default_rng(seed)
    ps = patch_set_for(n)
    cfg = HeadConfig(n_classes=n_classes, c=c, h=hw, w=hw, n=ps.n, c_a=cfg_kw.pop("c_a", 3), **cfg_kw)
    model = SYDNet(PbAHead(cfg, rng, dtype), None, ps)
    for _, p in model.named_parameters():
        p.data[...] = rng.normal(0.0, scale, size=p.shape)
    for name, buf in model.named_buffers():
        buf[...] = rng.uniform(0.5, 1.5, size=buf.shape) if name.endswith("var") else rng.normal(0, 0.2, size=buf.shape)
    return model

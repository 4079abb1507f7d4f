"""Optional SVG scatter of set size against uncertainty measures, by group.

matplotlib is imported lazily; the rest of the package works without it.
Output is deterministic (fixed hash salt, no embedded date) so repeated runs
produce byte-identical files.
"""
from __future__ import annotations

from .data import ScoreTable
from .errors import ConfigError
from .metrics import max_softmax_prob, predictive_entropy
from .prediction import PredictionSet


def uncertainty_scatter_svg(
    sets: list[PredictionSet],
    table: ScoreTable,
    path,
    *,
    title: str = "",
) -> None:
    """Two panels: set size vs max softmax probability and vs predictive
    entropy, colored by group; critical-label records drawn as crosses."""
    try:
        import matplotlib
    except ImportError as exc:
        raise ConfigError(
            "SVG emission requires matplotlib (install the 'plots' extra)"
        ) from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "conformal-audit"

    sizes = [s.size for s in sets]
    msp = [max_softmax_prob(r) for r in table.records]
    ent = [predictive_entropy(r) for r in table.records]
    critical = [r.label in table.critical_classes for r in table.records]
    groups = [r.group for r in table.records]

    cmap = plt.get_cmap("tab10")
    colors = {g: cmap(i % 10) for i, g in enumerate(table.groups)}

    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    for ax, xs, xlabel in ((axes[0], msp, "max softmax probability"),
                           (axes[1], ent, "predictive entropy")):
        for g in table.groups:
            for crit, marker in ((False, "o"), (True, "x")):
                pts = [
                    (x, s)
                    for x, s, gg, c in zip(xs, sizes, groups, critical)
                    if gg == g and c == crit
                ]
                if not pts:
                    continue
                ax.scatter(
                    [p[0] for p in pts], [p[1] for p in pts],
                    s=12, marker=marker, color=colors[g], alpha=0.5,
                    label=g if not crit else None,
                )
        ax.set_xlabel(xlabel)
    axes[0].set_ylabel("prediction set size")
    axes[0].legend(title="group", fontsize=8, title_fontsize=8)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)

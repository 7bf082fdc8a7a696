"""Plotly figures of fitted curves and RASE summaries."""

import logging
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import pandas as pd
import plotly.graph_objects as go

logger = logging.getLogger(__name__)

MAX_SCATTER_POINTS = 5000

CURVE_COLORS = {
    "composite": "#d93d3d",
    "alad": "#0b8f55",
    "oracle": "#1f4e9c",
    "truth": "#555555",
}


def create_fit_chart(
    xs: np.ndarray,
    ys: np.ndarray,
    grid_x: np.ndarray,
    curves: Mapping[str, np.ndarray],
    title: str = "Fitted regression curves",
) -> go.Figure:
    """Scatter of the data with one line per fitted curve.

    Args:
        xs: Covariates
        ys: Responses
        grid_x: Evaluation grid of the curves
        curves: Estimator name -> values on grid_x
        title: Figure title

    Returns:
        Plotly figure
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.size > MAX_SCATTER_POINTS:
        # Evenly strided subsample keeps the figure deterministic
        keep = np.linspace(0, xs.size - 1, MAX_SCATTER_POINTS).astype(int)
        xs, ys = xs[keep], ys[keep]

    fig = go.Figure()
    fig.add_trace(go.Scatter(
        x=xs, y=ys, mode="markers", name="data",
        marker=dict(size=3, color="#9e9e9e", opacity=0.5),
    ))
    for name, values in curves.items():
        fig.add_trace(go.Scatter(
            x=grid_x, y=np.asarray(values, dtype=float), mode="lines", name=name,
            line=dict(width=2, color=CURVE_COLORS.get(name)),
        ))

    fig.update_layout(
        title=title,
        xaxis_title="x",
        yaxis_title="y",
        template="plotly_white",
        height=450,
        margin=dict(l=40, r=20, t=50, b=40),
        legend=dict(orientation="h", yanchor="bottom", y=1.02, xanchor="right", x=1),
    )
    return fig


def create_rase_chart(table: pd.DataFrame, title: str = "Mean RASE by number of batches") -> go.Figure:
    """Mean RASE with one-std error bars, one trace per (law, pair)."""
    fig = go.Figure()
    for (dist, lam, pair), group in table.groupby(["distribution", "lam", "pair"], sort=False):
        fig.add_trace(go.Scatter(
            x=group["m"], y=group["mean_rase"],
            error_y=dict(type="data", array=group["std_rase"], visible=True),
            mode="lines+markers",
            name=f"{dist} (lam={lam:g}) {pair}",
        ))
    fig.add_hline(y=1.0, line_dash="dash", line_color="gray")
    fig.update_layout(
        title=title,
        xaxis_title="m",
        yaxis_title="RASE",
        template="plotly_white",
        height=400,
    )
    return fig


def save_figure(fig: go.Figure, path, fallback_html: bool = True) -> Optional[Path]:
    """Write an SVG via kaleido, or an HTML file when static export fails."""
    path = Path(path)
    try:
        fig.write_image(str(path), format="svg")
        return path
    except (ImportError, ValueError, RuntimeError) as err:
        if not fallback_html:
            raise
        html_path = path.with_suffix(".html")
        logger.warning("Static export unavailable (%s); writing %s instead", err, html_path.name)
        fig.write_html(str(html_path), include_plotlyjs="cdn")
        return html_path

import numpy as np
import pandas as pd
import plotly.express as px
import plotly.graph_objects as go
import streamlit as st


def loss_trace_figure(trace: pd.DataFrame, rolling_window: int = 50, title: str = "Loss Trace") -> go.Figure:
    """
    Line chart of a per-step trace with an optional rolling mean.

    Args:
        trace (pd.DataFrame): Columns step and loss.
        rolling_window (int): Window size for rolling mean (0 disables).
        title (str): Figure title.
    """
    fig = px.line(trace, x="step", y="loss", title=title)
    if rolling_window > 0 and len(trace):
        rolling = trace["loss"].rolling(window=rolling_window, min_periods=1).mean()
        fig.add_scatter(x=trace["step"], y=rolling, mode="lines", name=f"{rolling_window}-Step Rolling Mean")
    return fig


def ablation_curves_figure(curves: pd.DataFrame, rolling_window: int = 20) -> go.Figure:
    """Overlaid convergence curves, one per embedding size (mean over seeds)."""
    mean = curves.groupby(["num_vectors", "step"], as_index=False)["loss"].mean()
    if rolling_window > 0:
        mean["loss"] = mean.groupby("num_vectors")["loss"].transform(
            lambda s: s.rolling(window=rolling_window, min_periods=1).mean())
    mean["N"] = mean["num_vectors"].astype(str)
    return px.line(mean, x="step", y="loss", color="N", title="Inversion Loss by Embedding Size")


def ablation_bar_figure(table: pd.DataFrame, column: str = "final_loss") -> go.Figure:
    summary = table.groupby("num_vectors", as_index=False)[column].mean()
    summary["N"] = summary["num_vectors"].astype(str)
    fig = px.bar(summary, x="N", y=column, title=f"{column} by Embedding Size", text=column)
    fig.update_traces(texttemplate="%{text:.4f}")
    return fig


def psnr_figure(per_view_psnr, baseline=None) -> go.Figure:
    frame = pd.DataFrame({"view": [f"v{i}" for i in range(len(per_view_psnr))], "psnr": list(per_view_psnr)})
    fig = px.bar(frame, x="view", y="psnr", title="PSNR per Evaluation View", text="psnr")
    fig.update_traces(texttemplate="%{text:.2f}")
    if baseline is not None:
        fig.add_hline(y=baseline, line_dash="dash", annotation_text="uninverted token")
    return fig


def attention_heatmap_figure(weights, key_index: int, label: str = "") -> go.Figure:
    """
    Spatial attention of one prompt position, averaged over views and heads.

    Args:
        weights: (views, heads, queries, keys) array; queries form a square grid.
        key_index (int): Prompt position to show.
    """
    weights = np.asarray(weights)
    spatial = weights[..., key_index].mean(axis=(0, 1))
    side = int(round(np.sqrt(spatial.shape[0])))
    if side * side == spatial.shape[0]:
        spatial = spatial.reshape(side, side)
    else:
        spatial = spatial[None, :]
    title = f"Attention to position {key_index}" + (f" ({label})" if label else "")
    return px.imshow(spatial, color_continuous_scale="Viridis", title=title)


def plot_loss_trace(trace: pd.DataFrame, rolling_window: int = 50, title: str = "Loss Trace") -> None:
    if trace.empty or "loss" not in trace.columns:
        st.warning("Trace has no loss column.")
        return
    st.plotly_chart(loss_trace_figure(trace, rolling_window, title), use_container_width=True)


def plot_ablation(table: pd.DataFrame, curves: pd.DataFrame = None) -> None:
    st.plotly_chart(ablation_bar_figure(table), use_container_width=True)
    if curves is not None and not curves.empty:
        st.plotly_chart(ablation_curves_figure(curves), use_container_width=True)


def plot_psnr(per_view_psnr, baseline=None) -> None:
    if not per_view_psnr:
        st.warning("No per-view PSNR in this report.")
        return
    st.plotly_chart(psnr_figure(per_view_psnr, baseline), use_container_width=True)


def plot_attention(weights, key_index: int, label: str = "") -> None:
    st.plotly_chart(attention_heatmap_figure(weights, key_index, label), use_container_width=True)

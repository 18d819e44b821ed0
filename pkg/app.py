import streamlit as st
from pathlib import Path

from modules.data_audit import audit_run
from modules.data_loader import list_runs, load_run
from modules.insights import generate_insights
from modules.ui_components import (render_audit, render_empty_state, render_history_log, render_image_gallery,
                                   render_manifest, render_metric_card)
from modules.visualization import plot_ablation, plot_loss_trace, plot_psnr

# Page Config
st.set_page_config(
    page_title="Invert3D Run Explorer",
    page_icon="🧊",
    layout="wide",
    initial_sidebar_state="expanded"
)

# sidebar
st.sidebar.title("Navigation")
page = st.sidebar.radio("Go to", ["Overview", "Loss Traces", "Images", "Ablation", "Run Audit", "Run History Log"])

st.sidebar.markdown("---")
runs_root = st.sidebar.text_input("Runs folder", value="runs")


@st.cache_data  # run directories are append-only
def load_run_cached(path: str):
    return load_run(path)


runs = list_runs(runs_root)
if runs.empty:
    render_empty_state("📂", f"No runs found under '{runs_root}'.")
    st.stop()

commands = sorted(runs["command"].unique())
picked = st.sidebar.multiselect("Filter by command", options=commands)
visible = runs[runs["command"].isin(picked)] if picked else runs
run_id = st.sidebar.selectbox("Run", options=list(visible["run_id"])[::-1])
run_path = visible.loc[visible["run_id"] == run_id, "path"].iloc[0]
record = load_run_cached(run_path)

# --- OVERVIEW PAGE ---
if page == "Overview":
    st.title(f"🧊 {record.manifest.command}: {record.manifest.run_id}")
    col1, col2, col3 = st.columns(3)
    with col1:
        render_metric_card("Status", record.manifest.status)
    with col2:
        render_metric_card("Artifacts", f"{len(record.manifest.outputs):,}")
    with col3:
        if record.metrics and record.metrics.get("mean_psnr") is not None:
            render_metric_card("Mean PSNR", f"{record.metrics['mean_psnr']:.2f} dB")
        else:
            render_metric_card("Timestamp", record.manifest.timestamp or "n/a")

    if record.error:
        st.error(f"{record.error['error']}: {record.error['message']}")
        st.json(record.error.get("details", {}))

    if record.metrics:
        st.markdown("### 📊 Evaluation")
        plot_psnr(record.metrics.get("per_view_psnr") or [], (record.metrics.get("notes") or {}).get("baseline_psnr"))
        st.markdown("---")
        st.subheader("🤖 Automated Insights")
        for insight in generate_insights(record.metrics):
            st.info(insight)

    render_manifest(record.manifest)

elif page == "Loss Traces":
    st.title("📉 Loss Traces")
    if not record.traces:
        render_empty_state("📉", "This run has no loss trace.")
    else:
        rolling = st.slider("Rolling Mean Window (Steps)", 1, 200, 50)
        for name, trace in record.traces.items():
            plot_loss_trace(trace, rolling_window=rolling, title=name)

elif page == "Images":
    st.title("🖼️ Images")
    groups = sorted({p.parent for p in record.images})
    if groups:
        folder = st.selectbox("Folder", options=groups, format_func=lambda p: str(Path(p).relative_to(record.path)) or ".")
        render_image_gallery([p for p in record.images if p.parent == folder])
    else:
        render_image_gallery([])

elif page == "Ablation":
    st.title("🧪 Embedding-Size Ablation")
    if record.ablation is None:
        render_empty_state("🧪", "This run holds no ablation table.")
    else:
        plot_ablation(record.ablation, record.curves)
        st.dataframe(record.ablation, use_container_width=True)

elif page == "Run Audit":
    st.title("🕵️ Run Audit")
    render_audit(audit_run(record.path))

elif page == "Run History Log":
    st.title("📜 Run History Log")
    render_history_log(record.history)

import json

import streamlit as st


def render_empty_state(image_path_or_icon: str, message: str):
    """
    Renders a styled empty state when a run has nothing to show.

    Args:
        image_path_or_icon (str): Path to an image or an emoji.
        message (str): The message to display.
    """
    st.markdown(
        f"""
        <div style="text-align: center; padding: 50px;">
            <div style="font-size: 50px;">{image_path_or_icon}</div>
            <h3 style="color: #666;">{message}</h3>
            <p style="color: #999;">Pick another run or point the sidebar at a different runs folder.</p>
        </div>
        """,
        unsafe_allow_html=True
    )


def render_metric_card(title: str, value: str, delta: str = None):
    """
    Renders a metric card.

    Args:
        title (str): Title of the metric.
        value (str): Value to display.
        delta (str): The change/delta (optional).
    """
    st.metric(label=title, value=value, delta=delta)


def render_history_log(df_log):
    """
    Renders the run history table.
    """
    if df_log.empty:
        render_empty_state("📝", "No history recorded for this run.")
        return

    st.subheader("Traceability & Run History")
    st.dataframe(df_log, use_container_width=True)


def render_manifest(manifest):
    """Seeds, inputs and outputs of a run, with the resolved config folded away."""
    st.subheader("Manifest")
    col1, col2 = st.columns(2)
    with col1:
        st.write("**Seeds**")
        st.json(manifest.seeds)
        st.write("**Inputs**")
        st.json(manifest.inputs)
    with col2:
        st.write("**Outputs**")
        st.json(manifest.outputs)
    with st.expander("Resolved config"):
        st.code(json.dumps(manifest.config, indent=2, sort_keys=True), language="json")


def render_image_gallery(paths, columns: int = 4):
    if not paths:
        render_empty_state("🖼️", "This run produced no images.")
        return
    cols = st.columns(columns)
    for i, path in enumerate(paths):
        with cols[i % columns]:
            st.image(str(path), caption=path.name, use_container_width=True)


def render_audit(audit: dict):
    st.metric("Run Health Score", f"{audit['score']}/100")
    for line in audit["summary"]:
        st.write(line)
    st.dataframe(audit["details_table"], use_container_width=True)

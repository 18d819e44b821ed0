def generate_insights(report: dict) -> list[str]:
    """
    Generates automated findings from a metrics report (see metrics.MetricsReport).
    Returns a list of markdown strings.
    """
    insights = []

    if not report:
        return ["No metrics available to generate insights."]
    notes = report.get("notes") or {}

    # 1. Embedding capacity
    rows = report.get("ablation") or []
    if rows:
        by_size = {}
        for row in rows:
            by_size.setdefault(int(row["num_vectors"]), []).append(float(row["final_loss"]))
        means = {n: sum(v) / len(v) for n, v in by_size.items()}
        best = min(means, key=means.get)
        smallest, largest = min(means), max(means)
        insight_str = f"""
### 💡 Key Insight: Embedding Size
* **What:** N = {best} pseudo vectors reaches the lowest mean final inversion loss ({means[best]:.4f}) across {len(by_size)} sizes.
* **Why:** Going from N = {smallest} to N = {largest} changes the final loss from {means[smallest]:.4f} to {means[largest]:.4f}.
* **So What:** {"Capacity is the bottleneck at small N." if means[largest] <= means[smallest] else "Extra vectors do not pay off on this scene."}
* **Now What:** Use N = {best} for further inversions of comparable scenes.
        """
        insights.append(insight_str.strip())

    # 2. Single-image vs multi-view embedding
    if "heldout_loss_2d" in notes and "heldout_loss_3d" in notes:
        loss_2d, loss_3d = float(notes["heldout_loss_2d"]), float(notes["heldout_loss_3d"])
        gap = loss_2d - loss_3d
        insight_str = f"""
### 🧭 Key Insight: Held-out Views
* **What:** Held-out-view loss is {loss_3d:.4f} for the camera-conditioned embedding and {loss_2d:.4f} for the single-image embedding.
* **Why:** The single-image embedding only ever saw one pose.
* **So What:** {"The multi-view embedding generalizes better across viewpoints" if gap > 0 else "No multi-view advantage was measured"} (gap {gap:+.4f}).
* **Now What:** {"Prefer camera-conditioned inversion for 3D targets." if gap > 0 else "Train the denoiser longer or add views per iteration before comparing again."}
        """
        insights.append(insight_str.strip())

    # 3. Generation quality
    mean_psnr = report.get("mean_psnr")
    if mean_psnr is not None:
        baseline = notes.get("baseline_psnr")
        margin = "" if baseline is None else f" versus {float(baseline):.2f} dB for an uninverted token"
        insight_str = f"""
### 📈 Key Insight: View Fidelity
* **What:** Mean PSNR over {len(report.get("per_view_psnr") or [])} evaluation views is {float(mean_psnr):.2f} dB{margin}.
* **Why:** Evaluation views are rendered from fixed turnaround cameras, none of which were used for training.
* **So What:** {"The embedding carries scene content beyond the prompt prior." if baseline is not None and mean_psnr > baseline else "Fidelity is close to what the prompt alone produces."}
* **Now What:** Compare against the ablation table before changing the embedding size.
        """
        insights.append(insight_str.strip())

    # 4. Untrained components
    if report.get("untrained"):
        insights.append("""
### 🚨 Key Insight: Untrained Denoiser
* **What:** Samples in this run came from an untrained denoiser.
* **So What:** Image metrics are meaningless for this run.
* **Now What:** Run train-denoiser and pass its run directory as inputs.denoiser_run.
        """.strip())

    return insights or ["Metrics report holds nothing to summarize."]

import os
from pathlib import Path

import pandas as pd
import streamlit as st

from errors import FlatlabError
from harness import RESULT_COLUMNS, aggregate

NO_RUN = "(none)"


def _saved_runs(root):
    return sorted(str(path) for path in Path(root).glob("**/results.csv"))


def results_viewer_page():
    st.title("📊 Results")

    st.write("""
    Summarizes a sweep: the selected setting of every mode on the test split, averaged over seeds.
    Rows flagged best reach the top mean within one standard error.
    """)

    uploaded = st.file_uploader("Upload results.csv", type="csv")
    saved = _saved_runs(os.getenv("FLATLAB_OUTPUT_DIR", "runs"))
    choice = st.selectbox("...or pick a saved sweep", options=[NO_RUN] + saved)

    source = uploaded if uploaded is not None else (choice if choice != NO_RUN else None)
    if source is None:
        return

    try:
        results = pd.read_csv(source)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError):
        st.error("Not a CSV file")
        return
    if list(results.columns) != RESULT_COLUMNS:
        st.error(f"Expected the columns {', '.join(RESULT_COLUMNS)}")
        return

    try:
        table = aggregate(results)
    except FlatlabError as exc:
        st.error(str(exc))
        return

    st.subheader("Summary")
    st.dataframe(table.frame)
    st.text(table.to_text())

    with st.expander("Validation runs"):
        st.dataframe(results[results["split"] == "val"])

    st.download_button(
        label="Download summary (xlsx)",
        data=table.to_excel(),
        file_name="summary.xlsx",
        mime="application/vnd.openxmlformats-officedocument.spreadsheetml.sheet",
    )

import streamlit as st

from errors import FlatlabError
from landscape import LandscapeGrid, barrier, profile_summary


def landscape_viewer_page():
    st.title("🗺️ Landscapes")

    st.write("""
    Reads the grids written by `cli.py interpolate` and `cli.py surface`. Interpolations show the
    loss barrier between the two solutions and where loss and metric disagree; surfaces show their
    extreme cells.
    """)

    uploaded = st.file_uploader("Upload interpolation.csv or surface.csv", type="csv")
    if uploaded is None:
        return

    try:
        grid = LandscapeGrid.from_csv(uploaded)
    except FlatlabError as exc:
        st.error(str(exc))
        return

    st.write(f"{grid.cell_count} cells, splits: {', '.join(grid.splits)}")

    if grid.is_2d:
        st.subheader("Extreme cells")
        st.dataframe(grid.annotation_frame())
    else:
        split = st.selectbox("Barrier split", options=grid.splits)
        try:
            st.subheader("Barrier")
            st.dataframe(barrier(grid, split).to_frame())
            if {"train", "test"} <= set(grid.splits):
                st.subheader("Profile summary")
                st.dataframe(profile_summary(grid).to_frame())
        except FlatlabError as exc:
            st.error(f"Not an interpolation profile: {exc}")
            return

    flagged = int(grid.frame["flag_nonfinite"].sum())
    if flagged:
        st.warning(f"{flagged} evaluations were non-finite")

    with st.expander("Cells"):
        st.dataframe(grid.to_frame())

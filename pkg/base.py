import streamlit as st


def base_page():
    st.title("ℹ️ Info")

    st.write("""
    flatlab trains small models with plain optimizers, stochastic weight averaging (SWA),
    sharpness-aware minimization (SAM) and their combination WASAM, and measures how flat the
    resulting minima are. Everything the command line writes is CSV; these pages read it back.
    """)

    st.subheader("Pages:")

    st.markdown("""
    📊 **Results:**
    Upload (or pick from the output root) the `results.csv` of a sweep. Shows the per-mode summary
    with standard errors, deltas against the baseline and best flags, and exports it to Excel.

    🗺️ **Landscapes:**
    Upload an `interpolation.csv` or `surface.csv`. Shows the barrier along the interpolation, where
    train loss, test loss and test metric peak, and the minimizer/maximizer cells of a surface.
    """)

    st.subheader("Command line:")

    st.code("""python cli.py sweep --config configs/moons.json --out runs/moons
python cli.py interpolate --config configs/moons.json --run-dir runs/moons --seed 0
python cli.py surface --config configs/moons.json --checkpoint runs/moons/checkpoints/sam_seed0.fltl
python cli.py report --run-dir runs/moons --excel""", language="bash")

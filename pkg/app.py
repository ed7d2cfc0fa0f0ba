import os
import streamlit as st
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

from base import base_page
from results_viewer import results_viewer_page
from landscape_viewer import landscape_viewer_page

st.sidebar.title("⛰️ flatlab")
st.sidebar.write("Browse sweeps and loss landscapes of SWA, SAM and WASAM runs")
st.sidebar.caption(f"Output root: {os.getenv('FLATLAB_OUTPUT_DIR', 'runs')}")

page = st.sidebar.radio("Go to", [
    "💡 Info",
    "📊 Results",
    "🗺️ Landscapes",
])

if page == "💡 Info":
    base_page()
elif page == "📊 Results":
    results_viewer_page()
elif page == "🗺️ Landscapes":
    landscape_viewer_page()

import glob
import logging
import math
import os

import pandas as pd
import streamlit as st

from config import Config
from utils.errors import ConfigValidationError, ExperimentError
from utils.harness import load_config, run_experiment, scale_budgets

# Configure logging
logging.basicConfig(
    level=getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

# Configure Streamlit
st.set_page_config(
    page_title=Config.PAGE_TITLE,
    page_icon=Config.PAGE_ICON,
    layout="wide",
    initial_sidebar_state="expanded"
)

STATUS_BADGES = {'pass': "🟢 pass", 'fail': "🔴 fail", 'inconclusive': "🟡 inconclusive"}


@st.cache_data(ttl=60)
def list_experiment_files(directory):
    """YAML experiment documents available in the experiments directory"""
    try:
        return sorted(glob.glob(os.path.join(directory, "*.yaml")))
    except Exception as e:
        logger.error(f"Error listing experiment files: {str(e)}")
        return []


@st.cache_data(ttl=60)
def read_document(path):
    with open(path, 'r', encoding='utf-8') as f:
        return f.read()


# Error Handling & Monitoring
def safe_execute(func, *args, **kwargs):
    """Safely execute functions with error handling"""
    try:
        return func(*args, **kwargs)
    except ConfigValidationError as e:
        logger.error(f"Error in {func.__name__}: {str(e)}")
        st.error("Invalid configuration:\n\n" + "\n".join(f"- {issue}" for issue in e.issues))
        return None
    except ExperimentError as e:
        logger.error(f"Error in {func.__name__}: {str(e)}")
        st.error(f"Experiment failed: {str(e.cause)}")
        return None
    except Exception as e:
        logger.error(f"Error in {func.__name__}: {str(e)}")
        st.error(f"Operation failed: {str(e)}")
        return None


def log_user_action(action, details=""):
    """Log user actions for monitoring"""
    try:
        logger.info(f"User action: {action} - {details}")
    except Exception:
        pass


def prepare_config(path, seed, factor, output_dir):
    config = load_config(path)
    if factor != 1.0:
        config = scale_budgets(config, factor)
    output = None
    if output_dir:
        output = os.path.join(output_dir, os.path.basename(config.output))
    return config.override(seed=seed, output=output)


def format_metric(value):
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "n/a"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def show_system_status():
    """Show configuration health"""
    status = Config.validate_config()
    if status['valid']:
        st.write("**Configuration:** 🟢 OK")
    else:
        st.write("**Configuration:** 🔴 Issues")
        for issue in status['issues']:
            st.caption(issue)
    experiments = "🟢 Found" if status['experiments_found'] else "🔴 Missing"
    st.write(f"**Experiments directory:** {experiments}")
    st.write(f"**Code version:** {Config.CODE_VERSION}")


def show_metrics(bundle):
    st.subheader(f"{bundle.experiment}: {STATUS_BADGES.get(bundle.status, bundle.status)}")
    items = list(bundle.metrics.items())
    for start in range(0, len(items), 4):
        columns = st.columns(4)
        for column, (name, value) in zip(columns, items[start:start + 4]):
            with column:
                st.metric(name, format_metric(value))


def show_checks(bundle):
    if not bundle.checks:
        st.info("This experiment declares no thresholds")
        return
    st.dataframe(pd.DataFrame(bundle.checks), use_container_width=True)


def show_tables(bundle):
    if not bundle.tables:
        st.info("No result tables")
        return
    tabs = st.tabs(list(bundle.tables))
    for tab, (name, table) in zip(tabs, bundle.tables.items()):
        with tab:
            st.dataframe(table, use_container_width=True)
            st.download_button(
                "Download CSV",
                table.to_csv(index=False, float_format='%.17g', lineterminator='\n'),
                file_name=f"{bundle.experiment}_{name}.csv",
                mime="text/csv",
                key=f"download_{name}"
            )


def show_provenance(bundle):
    st.json(bundle.provenance)
    for note in bundle.notes:
        st.caption(note)
    if bundle.paths:
        st.write("**Written files:**")
        for path in bundle.paths:
            st.code(path, language=None)


def main():
    # Sidebar
    with st.sidebar:
        st.header("Experiment")

        files = list_experiment_files(Config.EXPERIMENTS_DIR)
        if not files:
            st.warning(f"No experiment documents in '{Config.EXPERIMENTS_DIR}'")
            selected = None
        else:
            selected = st.selectbox("Configuration", files, format_func=os.path.basename)

        seed = st.number_input("Seed", min_value=0, value=Config.DEFAULT_SEED, step=1)
        threads = st.number_input("Threads", min_value=1, max_value=64, value=max(1, Config.THREADS), step=1)
        factor = st.select_slider(
            "Sample budget scale",
            options=[0.01, 0.05, 0.1, 0.25, 0.5, 1.0, 2.0, 4.0],
            value=1.0
        )
        write = st.checkbox("Write CSV/JSON results", value=False)

        run_clicked = st.button("Run", type="primary", disabled=selected is None)

        st.markdown("---")

        # System Status
        st.subheader("System Status")
        show_system_status()

    # Main content
    st.title(Config.PAGE_TITLE)

    if selected is not None:
        with st.expander("Experiment document"):
            st.code(safe_execute(read_document, selected) or "", language="yaml")

    if run_clicked and selected is not None:
        log_user_action("run_experiment", f"{selected} seed={seed} threads={threads} scale={factor}")
        config = safe_execute(prepare_config, selected, int(seed), float(factor),
                              Config.OUTPUT_DIR if write else None)
        if config is not None:
            with st.spinner(f"Running {config.experiment}..."):
                bundle = safe_execute(run_experiment, config, threads=int(threads), write=write)
            if bundle is not None:
                st.session_state.bundle = bundle

    bundle = st.session_state.get('bundle')
    if bundle is None:
        st.info("Pick an experiment in the sidebar and press Run")
        return

    show_metrics(bundle)

    st.markdown("---")

    tab1, tab2, tab3 = st.tabs(["Tables", "Thresholds", "Provenance"])

    with tab1:
        show_tables(bundle)

    with tab2:
        show_checks(bundle)

    with tab3:
        show_provenance(bundle)


if __name__ == "__main__":
    main()

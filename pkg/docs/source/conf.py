# Configuration file for the Sphinx documentation builder.
#
# For the full list of built-in configuration values, see the documentation:
# https://www.sphinx-doc.org/en/master/usage/configuration.html

# -- Project information -----------------------------------------------------
# https://www.sphinx-doc.org/en/master/usage/configuration.html#project-information
import os
import re
import sys

sys.path.insert(0, os.path.abspath("../.."))

project = "srwseg"
copyright = "2026, srwseg contributors"
author = "srwseg contributors"

with open(os.path.join(os.path.dirname(__file__), "../../srwseg/_version.py")) as f:
    match = re.search(r'__version__\s*=\s*"([^"]+)"', f.read())
version = match.group(1) if match else "0.0.0"

# The full version, including alpha/beta/rc tags.
release = version
# -- General configuration ---------------------------------------------------
# https://www.sphinx-doc.org/en/master/usage/configuration.html#general-configuration

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.napoleon",
    "sphinx.ext.viewcode",
]
exclude_patterns = []


# -- Options for HTML output -------------------------------------------------
# https://www.sphinx-doc.org/en/master/usage/configuration.html#options-for-html-output

html_theme = "furo"
html_static_path = ["_static"]

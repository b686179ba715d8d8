"""Sphinx configuration."""

from datetime import datetime

project = "flowrec"
author = "The flowrec contributors"
copyright = f"{datetime.now().year}, {author}"
extensions = [
    "myst_parser",
    "sphinx.ext.autodoc",
    "sphinx.ext.napoleon",
]
autodoc_typehints = "description"
autodoc_member_order = "bysource"
autodoc_mock_imports = ["torch"]
html_theme = "furo"
myst_enable_extensions = ["colon_fence"]
myst_heading_anchors = 2
linkcheck_allowed_redirects = {}
html_title = "flowrec"
suppress_warnings = ["misc.highlighting_failure"]

# Configuration file for the Sphinx documentation builder.
#
# https://www.sphinx-doc.org/en/master/usage/configuration.html

# -- Path setup --------------------------------------------------------------

import datetime
import os
import sys

import semantic_version

docssrc_dir = os.path.dirname(os.path.abspath(__file__))
project_dir = os.path.dirname(docssrc_dir)
sys.path.insert(0, project_dir)

# -- Project information -----------------------------------------------------
import pvpASR  # noqa: E402

project = pvpASR.__name__
author = pvpASR.__author__
year = datetime.date.today().year
copyright = '{}, {}'.format("2026" if year == 2026 else "2026-{}".format(year),
                            author)

# extract the semantic version
semver = semantic_version.Version.coerce(pvpASR.__version__)
version = str(semver.truncate(level="patch"))
release = str(semver)

# -- General configuration ---------------------------------------------------

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.autosummary",
    "sphinx.ext.intersphinx",
    "sphinx.ext.napoleon",
    "sphinx.ext.mathjax",
    "recommonmark",
    "sphinx_click",
]

exclude_patterns = ['build']

source_suffix = {
    '.rst': 'restructuredtext',
    '.md': 'markdown',
}

master_doc = 'index'
pygments_style = 'sphinx'

# -- Options for HTML output -------------------------------------------------

html_theme = "alabaster"
htmlhelp_basename = pvpASR.__name__

# -- Options for napoleon extension ------------------------------------------

napoleon_include_init_with_doc = True
napoleon_use_admonition_for_examples = True
napoleon_use_admonition_for_notes = True
napoleon_use_rtype = False

# -- Options for autodoc extension -------------------------------------------

autoclass_content = "class"
autodoc_member_order = 'groupwise'
autosummary_generate = []

# -- Options for intersphinx extension ---------------------------------------

intersphinx_mapping = {
    "python": ("https://docs.python.org/3/", None),
    "numpy": ("https://numpy.org/doc/stable/", None),
}

#
# This file is part of twohop-lab
# Copyright (c) 2024-2025, the twohop-lab developers.
# All rights reserved.
#
# Sphinx configuration for the twohop-lab API docs.
#

import os
import sys

sys.path.insert(0, os.path.abspath("../.."))

project = "twohop_lab"
copyright = "2024-2025, the twohop-lab developers"
author = "twohop-lab developers"
release = "0.3.1"

extensions = ["sphinx.ext.autodoc", "sphinx.ext.viewcode"]
autodoc_member_order = "bysource"
master_doc = "index"
exclude_patterns = ["_build"]

html_theme = "sphinx_rtd_theme"

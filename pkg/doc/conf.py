#
# vitprune documentation build configuration file.
#
# This file is execfile()d with the current directory set to its
# containing dir.
#
import sys

sys.path.insert(0, "..")
import vitprune  # noqa: E402

extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.doctest',
    'sphinx.ext.coverage',
    'sphinx.ext.mathjax',
    'sphinx.ext.viewcode',
]

templates_path = ['_templates']
source_suffix = '.rst'
master_doc = 'index'

project = 'vitprune'
copyright = '2026, vitprune developers'

version = vitprune.__version__
release = vitprune.__version__

exclude_patterns = ['_build']
pygments_style = 'sphinx'

html_theme = 'alabaster'
html_static_path = ['_static']
htmlhelp_basename = 'vitprunedoc'

latex_elements = {
}
latex_documents = [
  ('index', 'vitprune.tex', 'vitprune Documentation',
   'vitprune developers', 'manual'),
]

man_pages = [
    ('index', 'vitprune', 'vitprune Documentation',
     ['vitprune developers'], 1)
]

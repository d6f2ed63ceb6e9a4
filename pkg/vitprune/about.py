__name__ = "vitprune"
__version__ = "0.1.0"
__author__ = "vitprune developers"
__author_email__ = "vitprune@users.noreply.github.com"
__description__ = "Token pruning with preservation and reactivation for " + \
                  "isotropic vision transformers"
__license__ = "MIT"
__url__ = "https://github.com/vitprune/vitprune"

all = [__name__, __version__, __author__, __author_email__, __description__,
       __license__, __url__]

# Constants only: no imports of other twinlink modules, and nothing
# that logs (logging isn't set up until LogArgumentParser.my_parse_args).
# Environment-driven settings are in twinlink/config.py.

import os

VERSION = "0.3.0"

# process title prefix; a "staging-" prefix selects the Sentry environment
APP = os.environ.get('TWINLINK_APP', 'twinlink')

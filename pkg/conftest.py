# Puts the repository root on sys.path so tests import instapbm and main.

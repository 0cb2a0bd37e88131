import sys

from sg_commonsense.cli import main

if __name__ == "__main__":
    sys.exit(main())

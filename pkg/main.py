import sys

from radloc.cli import main

if __name__ == "__main__":
    sys.exit(main())

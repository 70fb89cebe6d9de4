import sys

from instance_retrieval.cli import main

sys.exit(main())

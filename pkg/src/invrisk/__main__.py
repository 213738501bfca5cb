from invrisk.orchestrator.cli import main

raise SystemExit(main())

from lasso_ridge.cli import main

main()

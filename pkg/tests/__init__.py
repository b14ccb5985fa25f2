# Tests package for crowd-adapt

# VlasovFlow test suite

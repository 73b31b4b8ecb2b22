from steerfix import apply_initializer, build_unetd, explain_network, initializer_specs
from steerfix.explainsteer import write_reports

net = build_unetd(seed=0)
net = apply_initializer(net, initializer_specs(net, 'ghaar', seed=0))

spectra = explain_network(net)
for spectrum in spectra:
    print(spectrum.layer_id, spectrum.e0)
write_reports(spectra, 'explain-ghaar')

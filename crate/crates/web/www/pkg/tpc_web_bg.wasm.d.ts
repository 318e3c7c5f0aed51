/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const bias_correction: (a: number, b: number, c: number) => [number, number];
export const masks: (a: number) => [number, number];
export const tpc_vs_naive: (a: number, b: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
